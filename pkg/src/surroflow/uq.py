"""Monte Carlo propagation of permeability uncertainty and its diagnostics.

Both the simulator and a trained surrogate act as evaluators mapping one
permeability realisation to pressure and saturation maps at requested times.
First and second moments accumulate in one streaming pass (Welford update) so
an arbitrary number of realisations fits in constant memory; probe-point
samples are kept in full for density estimation.

Histograms use the Freedman-Diaconis bin width with a floor on the bin count.
A probe distribution is flagged bimodal when its histogram carries at least
two separated runs of occupied bins, which is the signature of interest here:
realisations split between plume arrival and non-arrival at a location.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError

FIELD_NAMES = ("pressure", "saturation")


@dataclass
class MomentFields:
    """Streaming mean and unbiased variance per (time, field, pixel)."""

    times_s: tuple[float, ...]
    mean: np.ndarray
    variance: np.ndarray
    count: int
    failures: int = 0
    realization_tag: str = ""

    def __post_init__(self):
        if self.mean.shape != self.variance.shape:
            raise DataError("mean and variance shapes disagree")


class RunningMoments:
    """Welford accumulator over arrays of fixed shape."""

    def __init__(self, shape):
        self.count = 0
        self._mean = np.zeros(shape, dtype=np.float64)
        self._m2 = np.zeros(shape, dtype=np.float64)

    def update(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._mean.shape:
            raise DataError(f"expected {self._mean.shape}, got {value.shape}")
        self.count += 1
        delta = value - self._mean
        self._mean += delta / self.count
        self._m2 += delta * (value - self._mean)

    @property
    def mean(self) -> np.ndarray:
        return self._mean.copy()

    @property
    def variance(self) -> np.ndarray:
        """Unbiased (n-1) variance; zeros until two updates arrived."""
        if self.count < 2:
            return np.zeros_like(self._m2)
        return self._m2 / (self.count - 1)


@dataclass
class PdfEstimate:
    """Histogram density of one probed quantity."""

    location: tuple[int, int]
    time_s: float
    field: str
    edges: np.ndarray
    density: np.ndarray
    count: int
    degenerate: bool = False

    @property
    def modes(self) -> int:
        occupied = self.density > 0
        return int(
            np.count_nonzero(np.diff(np.concatenate([[0], occupied.view(np.int8)])) == 1)
        )

    @property
    def bimodal(self) -> bool:
        return self.modes >= 2


def freedman_diaconis_bins(samples: np.ndarray, min_bins: int = 20, max_bins: int = 512) -> int:
    """Bin count from the Freedman-Diaconis rule, clipped to a sane range."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        return min_bins
    span = float(samples.max() - samples.min())
    if span == 0.0:
        return 1
    q75, q25 = np.percentile(samples, [75.0, 25.0])
    width = 2.0 * (q75 - q25) / samples.size ** (1.0 / 3.0)
    if width <= 0.0:
        return min_bins
    return int(np.clip(np.ceil(span / width), min_bins, max_bins))


def estimate_pdf(
    samples: np.ndarray,
    location: tuple[int, int],
    time_s: float,
    field_name: str,
    min_bins: int = 20,
) -> PdfEstimate:
    """Normalised histogram of probe samples; a constant sample is degenerate."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise DataError("cannot estimate a density from zero samples")
    lo, hi = float(samples.min()), float(samples.max())
    if lo == hi:
        eps = max(abs(lo) * 1e-9, 1e-12)
        edges = np.array([lo - eps, lo + eps])
        density = np.array([0.5 / eps])
        return PdfEstimate(
            location=location,
            time_s=time_s,
            field=field_name,
            edges=edges,
            density=density,
            count=samples.size,
            degenerate=True,
        )
    bins = freedman_diaconis_bins(samples, min_bins=min_bins)
    density, edges = np.histogram(samples, bins=bins, density=True)
    return PdfEstimate(
        location=location,
        time_s=time_s,
        field=field_name,
        edges=edges,
        density=density,
        count=samples.size,
    )


def ensemble_pass(
    evaluate,
    fields,
    times_s,
    probes=(),
    grid_shape=None,
    tag: str = "",
):
    """One sweep over realisations: moments plus raw probe samples.

    ``evaluate(field, times_s)`` must return an array ``[n_times, 2, h, w]``
    ordered (pressure, saturation). Realisations whose evaluation raises
    :class:`NumericalError` are excluded and counted. Accumulation order is
    the iteration order of ``fields``, so results are deterministic.

    Returns ``(MomentFields, probe_samples)`` where ``probe_samples`` maps
    ``(row, col)`` to an array ``[n_times, 2, n_successful]``.
    """
    times_s = tuple(float(t) for t in times_s)
    moments = None
    collected: dict[tuple[int, int], list] = {tuple(p): [] for p in probes}
    failures = 0
    for realization in fields:
        try:
            maps = np.asarray(evaluate(realization, times_s), dtype=np.float64)
        except NumericalError as exc:
            failures += 1
            warnings.warn(f"realisation excluded from ensemble: {exc}")
            continue
        if maps.ndim != 4 or maps.shape[0] != len(times_s) or maps.shape[1] != 2:
            raise DataError(
                f"evaluator returned {maps.shape}, expected "
                f"[{len(times_s)}, 2, height, width]"
            )
        if moments is None:
            if grid_shape is not None and maps.shape[2:] != tuple(grid_shape):
                raise DataError(
                    f"evaluator grid {maps.shape[2:]} does not match {grid_shape}"
                )
            moments = RunningMoments(maps.shape)
        moments.update(maps)
        for loc in collected:
            row, col = loc
            collected[loc].append(maps[:, :, row, col])
    if moments is None or moments.count < 2:
        raise NumericalError(
            f"ensemble too small: {0 if moments is None else moments.count} usable "
            f"realisations ({failures} failed)"
        )
    result = MomentFields(
        times_s=times_s,
        mean=moments.mean,
        variance=moments.variance,
        count=moments.count,
        failures=failures,
        realization_tag=tag,
    )
    probe_samples = {
        loc: np.stack(vals, axis=-1) for loc, vals in collected.items()
    }
    return result, probe_samples


def mc_moments(evaluate, fields, times_s) -> MomentFields:
    """Streaming ensemble mean and variance of pressure and saturation maps."""
    result, _ = ensemble_pass(evaluate, fields, times_s)
    return result


def mc_pdf(
    evaluate, fields, times_s, location, field_name: str = "saturation"
) -> list[PdfEstimate]:
    """Probe densities at one grid location, one estimate per requested time."""
    if field_name not in FIELD_NAMES:
        raise DataError(f"unknown field {field_name!r}, expected one of {FIELD_NAMES}")
    channel = FIELD_NAMES.index(field_name)
    _, samples = ensemble_pass(evaluate, fields, times_s, probes=(tuple(location),))
    per_probe = samples[tuple(location)]
    return [
        estimate_pdf(per_probe[j, channel], tuple(location), t, field_name)
        for j, t in enumerate(tuple(float(t) for t in times_s))
    ]


@dataclass
class UqComparison:
    """Surrogate-versus-simulator discrepancy summary."""

    times_s: tuple[float, ...]
    mean_rel_l2: dict[str, list[float]]
    variance_rel_l2: dict[str, list[float]]
    pdf_distances: dict = field(default_factory=dict)

    def worst(self, field_name: str) -> float:
        return max(self.mean_rel_l2[field_name])


def relative_l2(candidate: np.ndarray, reference: np.ndarray) -> float:
    """``|a - b| / |b|`` in the Frobenius norm, guarding an all-zero reference."""
    ref_norm = float(np.linalg.norm(reference))
    if ref_norm == 0.0:
        return float(np.linalg.norm(candidate) > 0)
    return float(np.linalg.norm(candidate - reference)) / ref_norm


def pdf_l1_distance(a: PdfEstimate, b: PdfEstimate, resolution: int = 2048) -> float:
    """L1 distance between two histogram densities on a shared fine grid.

    Bounded by 2; zero for identical densities.
    """
    lo = min(a.edges[0], b.edges[0])
    hi = max(a.edges[-1], b.edges[-1])
    if not hi > lo:
        return 0.0
    grid = np.linspace(lo, hi, resolution + 1)
    centres = 0.5 * (grid[:-1] + grid[1:])
    step = (hi - lo) / resolution

    def sample(est):
        idx = np.searchsorted(est.edges, centres, side="right") - 1
        vals = np.zeros(centres.shape)
        inside = (idx >= 0) & (idx < est.density.size) & (centres <= est.edges[-1])
        vals[inside] = est.density[idx[inside]]
        return vals

    return float(np.abs(sample(a) - sample(b)).sum() * step)


def compare_uq(
    surrogate_moments: MomentFields,
    oracle_moments: MomentFields,
    surrogate_pdfs: dict | None = None,
    oracle_pdfs: dict | None = None,
) -> UqComparison:
    """Relative moment errors per field and time, plus optional PDF distances.

    Both moment sets must come from the same realisation set: equal counts and
    matching tags are enforced so the comparison is paired, not two different
    Monte Carlo experiments.
    """
    if surrogate_moments.times_s != oracle_moments.times_s:
        raise DataError(
            f"time grids differ: {surrogate_moments.times_s} vs {oracle_moments.times_s}"
        )
    if surrogate_moments.count != oracle_moments.count:
        raise DataError(
            f"ensembles differ in size: {surrogate_moments.count} vs "
            f"{oracle_moments.count}"
        )
    if surrogate_moments.realization_tag != oracle_moments.realization_tag:
        raise DataError(
            "moment sets come from different realisation sets "
            f"({surrogate_moments.realization_tag!r} vs {oracle_moments.realization_tag!r})"
        )
    mean_err: dict[str, list[float]] = {}
    var_err: dict[str, list[float]] = {}
    for c, name in enumerate(FIELD_NAMES):
        mean_err[name] = [
            relative_l2(surrogate_moments.mean[j, c], oracle_moments.mean[j, c])
            for j in range(len(surrogate_moments.times_s))
        ]
        var_err[name] = [
            relative_l2(surrogate_moments.variance[j, c], oracle_moments.variance[j, c])
            for j in range(len(surrogate_moments.times_s))
        ]
    distances = {}
    if surrogate_pdfs and oracle_pdfs:
        for key in oracle_pdfs:
            if key in surrogate_pdfs:
                distances[key] = pdf_l1_distance(surrogate_pdfs[key], oracle_pdfs[key])
    return UqComparison(
        times_s=surrogate_moments.times_s,
        mean_rel_l2=mean_err,
        variance_rel_l2=var_err,
        pdf_distances=distances,
    )


def simulator_evaluator(config):
    """Adapter: run the flow solver for one realisation at requested times."""
    from .simulator import simulate

    def evaluate(realization, times_s):
        sim_cfg = config.sim_config(tuple(times_s))
        snaps = simulate(realization, sim_cfg)
        return np.stack(
            [np.stack([s.rescaled_pressure, s.saturation]) for s in snaps]
        )

    return evaluate


def surrogate_evaluator(net, normalization):
    """Adapter: evaluate the trained network at requested times.

    The network consumes the log-permeability modifier and a normalised time,
    and its first two channels are already in the rescaled units the simulator
    adapter produces.
    """

    def evaluate(realization, times_s):
        times_s = tuple(times_s)
        x = np.repeat(
            realization.log_values[None, None].astype(np.float32), len(times_s), axis=0
        )
        t_norm = normalization.normalize_time(np.asarray(times_s)).astype(np.float32)
        pred = net.forward(x, t_norm, train=False)
        return pred[:, :2].astype(np.float64)

    return evaluate
