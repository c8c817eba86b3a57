import shutil
import tempfile
import unittest
from unittest import mock

import pandas

from pyeegmae.attention import AttentionKind, attention_cost
from pyeegmae.bench import (BENCH_COLUMNS, SweepSpec, check_scaling, reports_frame, run_sweep, write_csv,
                            write_dat)
from pyeegmae.entity import ContractError, InvalidConfig
from pyeegmae.system import System
from pyeegmae.tensor import Precision

def sweep(**overrides):
    values = dict(mechanisms='standard, intra', configs='small', n_patches=2, channels='1, 2, 3, 4', repetitions=3,
                  warmup=0, load_threshold=0.0)
    values.update(overrides)
    return SweepSpec(values)

def analytic(mechanism, channels, n_patches=20):
    reports = []
    for n_channels in channels:
        report = attention_cost(mechanism, n_channels, n_patches, 8)
        report.config = 'small'
        reports.append(report)
    return reports

class TestSweepSpec(unittest.TestCase):
    def test_defaults(self):
        spec = SweepSpec()
        self.assertEqual(spec.mechanisms, ('standard', 'alternating'))
        self.assertEqual(spec.channels, tuple(range(1, 65)))
        self.assertEqual((spec.n_patches, spec.repetitions), (20, 10))
        self.assertIs(spec.precision, Precision.F32)

    def test_lists_from_text(self):
        self.assertEqual(sweep().channels, (1, 2, 3, 4))
        self.assertEqual(sweep().mechanisms, ('standard', 'intra'))

    def test_invariants(self):
        for values, key in (({'repetitions': 2}, 'repetitions'), ({'mechanisms': 'linformer'}, 'mechanisms'),
                            ({'configs': 'huge'}, 'configs')):
            with self.assertRaises(InvalidConfig) as context:
                sweep(**values)
            self.assertEqual(context.exception.key, key)

class TestSweep(unittest.TestCase):
    def test_measured_counts_match_analytic(self):
        reports = run_sweep(sweep())
        self.assertEqual(len(reports), 8)
        self.assertEqual([r.mechanism for r in reports[:4]], [AttentionKind.Standard] * 4)
        for report in reports:
            self.assertEqual(report.measured_elements, report.score_elements, report)
            self.assertEqual(report.status, 'ok')
            self.assertGreater(report.median_ns, 0)
            self.assertGreater(report.peak_bytes, 0)
        self.assertEqual(reports[3].score_elements, (4 * 2) ** 2)
        self.assertTrue(all(v.passed for v in check_scaling(reports)))

    def test_busy_machine_skips_timing(self):
        system = mock.Mock(spec=System)
        system.cpu_busy_fraction.return_value = 0.9
        reports = run_sweep(sweep(load_threshold=0.25), system)
        self.assertTrue(all(r.status == 'busy' and r.median_ns is None for r in reports))
        self.assertEqual(reports[0].measured_elements, reports[0].score_elements)
        system.monotonic_ns.assert_not_called()

    def test_unknown_load_still_times(self):
        system = mock.Mock(spec=System)
        system.cpu_busy_fraction.return_value = None
        system.monotonic_ns.side_effect = iter(range(0, 10 ** 6, 7))
        reports = run_sweep(sweep(mechanisms='intra', channels='2', load_threshold=0.25), system)
        self.assertEqual(reports[0].median_ns, 7)

class TestScaling(unittest.TestCase):
    def test_expected_slopes(self):
        verdicts = check_scaling(analytic('standard', range(1, 9)) + analytic('intra', range(1, 9))
                                 + analytic('alternating', range(20, 30)))
        slopes = {v.mechanism: v.element_slope for v in verdicts}
        self.assertAlmostEqual(slopes[AttentionKind.Standard], 2.0, places=6)
        self.assertAlmostEqual(slopes[AttentionKind.Intra], 1.0, places=6)
        self.assertAlmostEqual(slopes[AttentionKind.Alternating], 2.0, places=6)
        self.assertTrue(all(v.passed and v.time_ok for v in verdicts))

    def test_too_few_points(self):
        with self.assertRaises(ContractError):
            check_scaling(analytic('standard', (1, 2, 3)))
        with self.assertRaises(ContractError):
            check_scaling(analytic('alternating', range(1, 21)))

    def test_count_mismatch_fails(self):
        reports = analytic('standard', range(1, 6))
        reports[2].measured_elements = reports[2].score_elements + 1
        self.assertFalse(check_scaling(reports)[0].passed)

    def test_time_slope_and_inversions(self):
        reports = analytic('intra', range(1, 7))
        for report, median in zip(reports, (10, 20, 30, 25, 50, 60)):
            report.median_ns = median
        verdict = check_scaling(reports)[0]
        self.assertEqual(verdict.inversions, 1)
        self.assertIsNotNone(verdict.time_slope)

class TestOutputs(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp(prefix='pyeegmae_bench')

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_csv(self):
        reports = analytic('standard', (1, 2))
        reports[0].median_ns, reports[0].peak_bytes = 1500, 4096
        path = System().join(self.directory, 'bench.csv')
        write_csv(reports, path)
        frame = pandas.read_csv(path)
        self.assertEqual(tuple(frame.columns), BENCH_COLUMNS)
        self.assertEqual(frame['score_elements'].tolist(), [400, 1600])
        self.assertEqual(frame['mechanism'].tolist(), ['standard', 'standard'])
        self.assertEqual(len(reports_frame(reports)), 2)

    def test_dat_blocks(self):
        reports = analytic('intra', (2, 1)) + analytic('standard', (1,))
        reports[0].median_ns = 200
        path = System().join(self.directory, 'bench.dat')
        write_dat(reports, path)
        blocks = System().read_text(path).split('\n\n\n')
        self.assertEqual(blocks[0].splitlines(), ['# intra small', '1 NaN', '2 200'])
        self.assertEqual(blocks[1].splitlines(), ['# standard small', '1 NaN'])
