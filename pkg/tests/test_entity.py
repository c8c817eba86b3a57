import unittest

from hypothesis import given
from hypothesis import strategies as st
from voluptuous import Optional, Schema

from pyeegmae.entity import (ConfigEntity, ConfigError, Count, InvalidConfig, MalformedConfig, RealList,
                             decode_run_file, render_value)

class ExampleConfig(ConfigEntity):
    @property
    def schema(self):
        return Schema({
            Optional('n_layers', default=8): Count,
            Optional('rates', default=(0.5, 0.25)): RealList,
            Optional('name', default='small'): str,
        })

    def validate(self):
        if self.n_layers % 2:
            raise self.invalid('n_layers must be even', 'n_layers')

class TestDecodeRunFile(unittest.TestCase):
    def test_pairs_comments_and_blank_lines(self):
        values = decode_run_file('# header\n\nn_layers = 4   # trailing\nname=base\n')
        self.assertEqual(list(values.items()), [('n_layers', '4'), ('name', 'base')])
        self.assertEqual(values.lines, {'n_layers': 3, 'name': 4})

    def test_line_without_equals(self):
        with self.assertRaises(MalformedConfig) as context:
            decode_run_file('n_layers = 4\njunk\n')
        self.assertEqual(context.exception.line, 2)

    def test_duplicate_key(self):
        with self.assertRaises(MalformedConfig) as context:
            decode_run_file('a = 1\na = 2\n')
        self.assertEqual(context.exception.key, 'a')
        self.assertEqual(context.exception.line, 2)

    def test_empty_key(self):
        with self.assertRaises(MalformedConfig):
            decode_run_file(' = 3\n')

class TestConfigEntity(unittest.TestCase):
    def test_defaults_become_attributes(self):
        config = ExampleConfig()
        self.assertEqual(config.n_layers, 8)
        self.assertEqual(config.rates, (0.5, 0.25))
        self.assertEqual(config['name'], 'small')
        self.assertEqual(len(config), 3)

    def test_text_is_coerced(self):
        config = ExampleConfig('n_layers = 4\nrates = 1, 2.5\n')
        self.assertEqual(config.n_layers, 4)
        self.assertEqual(config.rates, (1.0, 2.5))

    def test_unknown_key_names_key_and_line(self):
        with self.assertRaises(InvalidConfig) as context:
            ExampleConfig('n_layers = 4\ndepth = 3\n')
        self.assertEqual(context.exception.key, 'depth')
        self.assertEqual(context.exception.line, 2)
        self.assertIn('line 2', str(context.exception))

    def test_schema_violation(self):
        with self.assertRaises(InvalidConfig) as context:
            ExampleConfig({'n_layers': 0})
        self.assertEqual(context.exception.key, 'n_layers')

    def test_validate_hook_reports_line(self):
        with self.assertRaises(InvalidConfig) as context:
            ExampleConfig('\nn_layers = 3\n')
        self.assertEqual(context.exception.line, 2)
        self.assertEqual(context.exception.detail, 'n_layers must be even')

    def test_config_errors_share_a_base(self):
        self.assertTrue(issubclass(InvalidConfig, ConfigError))
        self.assertTrue(issubclass(MalformedConfig, ConfigError))

    def test_replace_validates_again(self):
        config = ExampleConfig()
        self.assertEqual(config.replace(n_layers=2).n_layers, 2)
        with self.assertRaises(InvalidConfig):
            config.replace(n_layers=5)

    def test_equality_and_hash(self):
        self.assertEqual(ExampleConfig('n_layers = 4'), ExampleConfig({'n_layers': 4}))
        self.assertNotEqual(ExampleConfig(), ExampleConfig({'n_layers': 4}))
        self.assertEqual(hash(ExampleConfig()), hash(ExampleConfig()))

    def test_to_text_is_sorted_and_reparseable(self):
        config = ExampleConfig({'n_layers': 6, 'name': 'large'})
        text = config.to_text()
        self.assertEqual(text.splitlines()[0], 'n_layers = 6')
        self.assertEqual(ExampleConfig(text), config)

    def test_config_hash_is_sha256(self):
        digest = ExampleConfig().config_hash()
        self.assertEqual(len(digest), 64)
        self.assertNotEqual(digest, ExampleConfig({'n_layers': 2}).config_hash())

    @given(st.integers(min_value=1, max_value=10 ** 6).map(lambda n: 2 * n))
    def test_even_counts_accepted(self, n_layers):
        self.assertEqual(ExampleConfig('n_layers = {}'.format(n_layers)).n_layers, n_layers)

class TestRenderValue(unittest.TestCase):
    def test_values(self):
        self.assertEqual(render_value((1.0, 2.0)), '1.0, 2.0')
        self.assertEqual(render_value(True), 'true')
        self.assertEqual(render_value(None), '')
        self.assertEqual(render_value(3), '3')
