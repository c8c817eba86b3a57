"""@ingroup pyeegmae
@file
The attention cost benchmark: analytic score counts, instrumented counts, single-threaded median wall time and peak
transient allocation of a two-layer attention stack, swept over channel counts.
"""
import logging
import math
import tracemalloc
from collections import OrderedDict

import numpy as np
import pandas
from threadpoolctl import threadpool_limits
from voluptuous import Coerce, Optional, Schema

from .attention import AttentionKind, AttentionProbe, UnknownMechanism, attention_cost, layer_kind, make_layer
from .encoder import PRESETS, EncoderConfig
from .entity import ConfigEntity, ContractError, Count, CountList, Index, Real, Seed, TextList
from .system import System
from .tensor import Precision, Tensor, no_grad, seeded_generator

log = logging.getLogger(__name__)

BENCH_COLUMNS = ('mechanism', 'config', 'C', 'Np', 'de', 'score_elements', 'score_flops', 'median_ns', 'peak_bytes',
                 'status')

## Expected log-log slopes of score entries against C.
EXPECTED_SLOPES = {AttentionKind.Standard: 2.0, AttentionKind.Inter: 2.0, AttentionKind.Intra: 1.0}

class SweepSpec(ConfigEntity):
    """A benchmark sweep: every (config, mechanism, C) point at a fixed N_p.

    load_threshold is the busy fraction (one-minute load average per cpu) above which the sweep refuses to time; 0
    disables the check.
    """
    @property
    def schema(self):
        return Schema({
            Optional('mechanisms', default=('standard', 'alternating')): TextList,
            Optional('configs', default=('large',)): TextList,
            Optional('n_patches', default=20): Count,
            Optional('channels', default=tuple(range(1, 65))): CountList,
            Optional('repetitions', default=10): Count,
            Optional('warmup', default=3): Index,
            Optional('batch_size', default=1): Count,
            Optional('load_threshold', default=0.25): Real,
            Optional('precision', default='f32'): Coerce(Precision),
            Optional('seed', default=0): Seed,
        })

    def validate(self):
        if self.repetitions < 3:
            raise self.invalid('at least 3 repetitions are needed for a median, got {}'.format(self.repetitions),
                               'repetitions')
        for mechanism in self.mechanisms:
            try:
                AttentionKind.parse(mechanism)
            except UnknownMechanism as error:
                raise self.invalid(str(error), 'mechanisms')
        for name in self.configs:
            if name.lower() not in PRESETS:
                raise self.invalid('unknown preset "{}"'.format(name), 'configs')

class AttentionStack(object):
    """Two attention layers of one mechanism, odd parity then even parity, as they appear in an encoder.
    """
    def __init__(self, kind, config, rng):
        dtype = config.dtype
        self.kind = kind
        self.layers = [make_layer(layer_kind(kind, number), config.embed_dim, config.n_heads, rng, dtype)
                       for number in (1, 2)]

    def __call__(self, grid, probe=None):
        for layer in self.layers:
            grid = layer(grid, None, probe)
        return grid

def _median_ns(stack, grid, spec, system):
    for _ in range(spec.warmup):
        stack(grid)
    timings = []
    for _ in range(spec.repetitions):
        start = system.monotonic_ns()
        stack(grid)
        timings.append(system.monotonic_ns() - start)
    return int(np.median(timings))

def _peak_bytes(stack, grid):
    tracemalloc.start()
    try:
        stack(grid)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak

def measure_point(stack, config_name, config, n_channels, spec, system, timed=True):
    """Measures one sweep point.

    @returns A CostReport whose score counts are per example and per layer peak; `measured_elements` holds the
    instrumented count from the forward pass.
    """
    report = attention_cost(stack.kind, n_channels, spec.n_patches, config.embed_dim)
    report.config = config_name
    rng = seeded_generator(spec.seed, n_channels)
    shape = (spec.batch_size, n_channels, spec.n_patches, config.embed_dim)
    try:
        with no_grad():
            grid = Tensor(rng.standard_normal(shape).astype(config.dtype))
            probe = AttentionProbe()
            stack(grid, probe)
            report.measured_elements = probe.peak_layer_elements // spec.batch_size
            if timed:
                report.median_ns = _median_ns(stack, grid, spec, system)
                report.peak_bytes = _peak_bytes(stack, grid)
    except MemoryError:
        log.warning('%s/%s at C=%d ran out of memory', stack.kind.value, config_name, n_channels)
        report.status = 'oom'
    return report

def run_sweep(spec, system=None):
    """Runs every sweep point single-threaded.

    If the machine is busier than spec.load_threshold, nothing is timed and every report carries status "busy".
    Points that run out of memory carry status "oom"; the sweep continues.

    @param spec A SweepSpec.
    @returns A list of CostReports in (config, mechanism, C) order.
    """
    system = system or System()
    busy = system.cpu_busy_fraction()
    timed = True
    if spec.load_threshold > 0.0 and busy is not None and busy > spec.load_threshold:
        log.warning('Machine is %.0f%% busy (threshold %.0f%%); timings skipped', 100 * busy,
                    100 * spec.load_threshold)
        timed = False
    reports = []
    with threadpool_limits(limits=1):
        for config_name in spec.configs:
            config = EncoderConfig.preset(config_name, precision=spec.precision)
            for mechanism in spec.mechanisms:
                stack = AttentionStack(AttentionKind.parse(mechanism), config, seeded_generator(spec.seed, 0))
                for n_channels in spec.channels:
                    report = measure_point(stack, config_name.lower(), config, n_channels, spec, system, timed)
                    if not timed:
                        report.status = 'busy'
                    log.debug('%r: %s ns', report, report.median_ns)
                    reports.append(report)
                log.info('Swept %s/%s over %d channel counts', mechanism, config_name, len(spec.channels))
    return reports

class ScalingVerdict(object):
    """The fitted log-log slopes of one (mechanism, config) series and whether they match expectations.
    """
    #pylint: disable=too-many-arguments
    def __init__(self, mechanism, config, element_slope, time_slope, expected, counts_match, inversions):
        self.mechanism = mechanism
        self.config = config
        self.element_slope = element_slope
        self.time_slope = time_slope
        self.expected = expected
        self.counts_match = counts_match
        self.inversions = inversions

    @property
    def passed(self):
        """Element slope within 0.1 of the expectation (when there is one) and instrumented counts equal to analytic.
        """
        slope_ok = self.expected is None or abs(self.element_slope - self.expected) <= 0.1
        return slope_ok and self.counts_match

    @property
    def time_ok(self):
        if self.expected is None or self.time_slope is None:
            return True
        return abs(self.time_slope - self.expected) <= 0.5

    def __repr__(self):
        return 'ScalingVerdict({}/{}: slope {:.3f}, expected {})'.format(self.mechanism.value, self.config,
                                                                         self.element_slope, self.expected)

def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])

def check_scaling(reports, min_points=4):
    """Fits log-log slopes of score entries (and of median time, where measured) against C per series.

    Alternating attention is fitted over its inter-dominated points (C >= N_p), where the expected slope is 2.

    @returns A list of ScalingVerdicts.
    @throws ContractError if a series has fewer than @p min_points distinct C values.
    """
    series = OrderedDict()
    for report in reports:
        series.setdefault((report.mechanism, report.config), []).append(report)
    verdicts = []
    for (kind, config), points in series.items():
        points = sorted(points, key=lambda r: r.n_channels)
        expected = EXPECTED_SLOPES.get(kind)
        if kind is AttentionKind.Alternating:
            points = [r for r in points if r.n_channels >= r.n_patches]
            expected = 2.0
        channels = np.array([r.n_channels for r in points], dtype=np.float64)
        if len(set(channels)) < min_points:
            raise ContractError('{}/{} has {} distinct C values, need {}'.format(kind.value, config, len(set(channels)),
                                                                                min_points))
        elements = np.array([r.score_elements for r in points], dtype=np.float64)
        timed = [r for r in points if r.median_ns]
        time_slope = None
        inversions = 0
        if len(timed) >= min_points:
            times = np.array([r.median_ns for r in timed], dtype=np.float64)
            time_slope = _slope([r.n_channels for r in timed], times)
            inversions = int(np.sum(np.diff(times) < 0))
            if inversions == 1:
                log.warning('%s/%s: one timing inversion over C', kind.value, config)
            elif inversions > 1:
                log.warning('%s/%s: %d timing inversions over C', kind.value, config, inversions)
        counts_match = all(r.measured_elements is None or r.measured_elements == r.score_elements for r in points)
        verdicts.append(ScalingVerdict(kind, config, _slope(channels, elements), time_slope, expected, counts_match,
                                       inversions))
    return verdicts

def reports_frame(reports):
    """@returns A pandas.DataFrame with the benchmark CSV columns.
    """
    return pandas.DataFrame([r.as_row() for r in reports], columns=list(BENCH_COLUMNS))

def write_csv(reports, path):
    reports_frame(reports).to_csv(path, index=False)
    log.info('Wrote %d benchmark rows to %s', len(reports), path)

def write_dat(reports, path, system=None):
    """Writes gnuplot data: one block per (mechanism, config) series, columns "C median_ns", blocks separated by two
    blank lines so that `index` selects a series.
    """
    system = system or System()
    frame = reports_frame(reports)
    blocks = []
    for (mechanism, config), series in frame.groupby(['mechanism', 'config'], sort=False):
        lines = ['# {} {}'.format(mechanism, config)]
        for _, row in series.sort_values('C').iterrows():
            median = row['median_ns']
            lines.append('{} {}'.format(int(row['C']), 'NaN' if median is None or
                                        (isinstance(median, float) and math.isnan(median)) else int(median)))
        blocks.append('\n'.join(lines))
    with system.open_text(path, 'w') as dat:
        dat.write('\n\n\n'.join(blocks) + '\n')
