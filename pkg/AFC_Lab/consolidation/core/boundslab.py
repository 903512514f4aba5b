"""
Numerical checks for the analytical claims behind the objective.

- check_taylor: first-order expansion of the loss in a feature map; the
  residual must shrink quadratically on smooth fixtures
- check_cs_chain: E<g,d> <= E|<g,d>| <= E||g|| ||d|| <= sqrt(E||g||^2 E||d||^2),
  plus the discriminant form of the last step
- check_proposition1: phi_old E_old[dZ] <= phi_old E_old + phi_new E_new == E_mix[dZ]
  on exactly enumerated finite mixtures
- check_importance_bound_link: per channel, (E<g,dZ>)^2 <= I_c E||dZ||^2 with I_c
  taken from the importance estimator and exact teacher gradients
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from class_stream.dataops import MixtureWeights

from . import tensor as T
from .errors import ContractError, NonDifferentiableError
from .importance import estimate, tap_gradients
from .losses import margin_values
from .network import IncrementalNet
from .seeding import derive_seed

logger = logging.getLogger(__name__)

CHAIN_TOLERANCE = 1e-10
IDENTITY_TOLERANCE = 1e-12
TAYLOR_EPS = (1e-3, 5e-4, 2.5e-4)
TAYLOR_BAND = (3.0, 5.0)
TAYLOR_PASS_RATE = 0.95


@dataclass
class BoundTrialReport:
    suite: str
    trials: int = 0
    violations: int = 0
    max_slack: float = float("-inf")
    excluded: int = 0
    required_pass_rate: float = 1.0
    links: List[Dict[str, float]] = field(default_factory=list, repr=False)

    @property
    def evaluated(self) -> int:
        return self.trials - self.excluded

    @property
    def passed(self) -> bool:
        if self.required_pass_rate >= 1.0:
            return self.violations == 0 and self.evaluated > 0
        return self.evaluated > 0 and (self.evaluated - self.violations) >= self.required_pass_rate * self.evaluated

    def record(self, slack: float, violated: bool) -> None:
        self.max_slack = max(self.max_slack, float(slack))
        self.violations += int(violated)

    def to_dict(self) -> Dict[str, object]:
        return {
            "suite": self.suite,
            "trials": self.trials,
            "violations": self.violations,
            "excluded": self.excluded,
            "max_slack": None if math.isinf(self.max_slack) else self.max_slack,
            "passed": self.passed,
        }


def _relative_excess(lhs: float, rhs: float) -> float:
    """(lhs - rhs) scaled by the larger magnitude; <= 0 when lhs <= rhs."""
    scale = max(abs(lhs), abs(rhs))
    return 0.0 if scale == 0.0 else (lhs - rhs) / scale


# -----------------------------------------------------------------------------
# Taylor expansion
# -----------------------------------------------------------------------------
class LinearFixture:
    """L(z) = <a, z> + b; the expansion is exact."""

    def __init__(self, a: np.ndarray, b: float, z0: np.ndarray, direction: np.ndarray):
        self.a, self.b, self.z0, self.direction = np.asarray(a, float), float(b), np.asarray(z0, float), np.asarray(direction, float)

    def loss(self, z: np.ndarray) -> float:
        return math.fsum((self.a * z).ravel()) + self.b

    def gradient(self, z: np.ndarray) -> np.ndarray:
        return self.a.copy()

    def pattern(self, z: np.ndarray) -> bytes:
        return b""


class QuadraticFixture:
    """L(z) = ||z||_F^2; the residual is eps^2 ||D||^2 exactly."""

    def __init__(self, z0: np.ndarray, direction: np.ndarray):
        self.z0, self.direction = np.asarray(z0, float), np.asarray(direction, float)

    def loss(self, z: np.ndarray) -> float:
        return math.fsum((z * z).ravel())

    def gradient(self, z: np.ndarray) -> np.ndarray:
        return 2.0 * z

    def pattern(self, z: np.ndarray) -> bytes:
        return b""


class NetworkFixture:
    """Mean classification loss of a network continued from the output of block `layer`."""

    def __init__(self, model: IncrementalNet, images: np.ndarray, targets: np.ndarray,
                 layer: int, direction: Optional[np.ndarray] = None, seed: int = 0):
        self.model = model.eval()
        self.targets = np.asarray(targets, dtype=np.int64)
        self.layer = layer
        with_taps = model.forward(images, update_stats=False).taps
        self.z0 = next(t.maps.data for t in with_taps if t.layer == layer).copy()
        if direction is None:
            direction = np.random.default_rng(seed).standard_normal(self.z0.shape)
            direction /= np.linalg.norm(direction)
        self.direction = direction

    def _margins(self, z, pattern: Optional[List[np.ndarray]] = None):
        out = self.model.forward_from_tap(self.layer, z, pattern=pattern)
        head = self.model.head
        return margin_values(out.scores, self.targets, head.eta.data, head.delta)

    def loss(self, z: np.ndarray) -> float:
        return T.mean(T.relu(self._margins(z))).item()

    def gradient(self, z: np.ndarray) -> np.ndarray:
        zt = T.Tensor(z, requires_grad=True)
        with T.Tape():
            loss = T.mean(T.relu(self._margins(zt)))
            grads = T.backward(loss, [zt])
        return grads[zt]

    def pattern(self, z: np.ndarray) -> bytes:
        signs: List[np.ndarray] = []
        margins = self._margins(z, pattern=signs)
        signs.append(margins.data > 0)
        return np.packbits(np.concatenate([s.ravel() for s in signs])).tobytes()


@dataclass
class TaylorReport:
    eps: List[float]
    residuals: List[float]
    ratios: List[float]
    exact: bool
    passed: bool


def check_taylor(fixture, eps_list: Sequence[float] = TAYLOR_EPS,
                 band: Tuple[float, float] = TAYLOR_BAND) -> TaylorReport:
    """
    r(eps) = |L(z + eps D) - L(z) - eps <grad L(z), D>|; halving eps must divide r by ~4.

    Residuals at rounding level count as exact zeros (linear fixtures, D = 0).
    Raises NonDifferentiableError if an activation or clamp boundary is crossed.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 2:
        raise ContractError("check_taylor needs at least two step sizes")
    for a, b in zip(eps_list, eps_list[1:]):
        if not math.isclose(a / b, 2.0, rel_tol=1e-12):
            raise ContractError(f"step sizes must halve successively, got {eps_list}")
    z0, d = fixture.z0, fixture.direction
    base = fixture.loss(z0)
    slope = math.fsum((fixture.gradient(z0) * d).ravel())
    reference = fixture.pattern(z0)
    floor = 64.0 * np.finfo(float).eps * (abs(base) + max(eps_list) * abs(slope) + 1.0)

    residuals: List[float] = []
    for eps in eps_list:
        z = z0 + eps * d
        if fixture.pattern(z) != reference:
            raise NonDifferentiableError(f"activation pattern changes within step {eps:g}")
        residuals.append(abs(fixture.loss(z) - base - eps * slope))

    exact_flags = [r <= floor for r in residuals]
    ratios: List[float] = []
    ok = True
    for (r1, e1), (r2, e2) in zip(zip(residuals, exact_flags), zip(residuals[1:], exact_flags[1:])):
        if e1 and e2:
            continue
        ratio = float("inf") if e2 else r1 / r2
        ratios.append(ratio)
        ok &= band[0] <= ratio <= band[1]
    return TaylorReport(eps=eps_list, residuals=residuals, ratios=ratios, exact=all(exact_flags), passed=ok)


def random_network_fixture(seed: int, activation: str = "softplus") -> NetworkFixture:
    rng = np.random.default_rng(seed)
    model = IncrementalNet(in_channels=2, channels=(3, 4), activation=activation,
                           proxies_per_class=2, seed=int(rng.integers(2**31)))
    model.grow_head(3, rng)
    images = rng.uniform(0.0, 1.0, size=(4, 2, 8, 8))
    targets = rng.integers(0, 3, size=4)
    return NetworkFixture(model, images, targets, layer=1, seed=int(rng.integers(2**31)))


def run_taylor_suite(trials: int = 200, seed: int = 0) -> BoundTrialReport:
    report = BoundTrialReport("taylor", required_pass_rate=TAYLOR_PASS_RATE)
    for i in range(trials):
        report.trials += 1
        try:
            result = check_taylor(random_network_fixture(derive_seed(seed, i)))
        except NonDifferentiableError:
            report.excluded += 1
            continue
        worst = max([abs(r - 4.0) / 4.0 for r in result.ratios], default=0.0)
        report.record(worst, not result.passed)
        report.links.append({"trial": i, "ratio_min": min(result.ratios, default=4.0),
                             "ratio_max": max(result.ratios, default=4.0)})
    return report


# -----------------------------------------------------------------------------
# Cauchy-Schwarz / Jensen chain
# -----------------------------------------------------------------------------
@dataclass
class PairSample:
    """A finite distribution over (gradient, delta) pairs; rows are outcomes."""
    grads: np.ndarray
    deltas: np.ndarray
    weights: Optional[np.ndarray] = None

    def probabilities(self) -> np.ndarray:
        n = self.grads.shape[0]
        if self.weights is None:
            return np.full(n, 1.0 / n)
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0):
            raise ContractError("pair weights must be non-negative")
        return w / math.fsum(w)


def _expect(p: np.ndarray, values: np.ndarray) -> float:
    return math.fsum((p * values).ravel())


def chain_links(sample: PairSample) -> Dict[str, float]:
    g = np.asarray(sample.grads, dtype=np.float64).reshape(sample.grads.shape[0], -1)
    d = np.asarray(sample.deltas, dtype=np.float64).reshape(sample.deltas.shape[0], -1)
    if g.shape != d.shape:
        raise ContractError(f"gradient rows {g.shape} and delta rows {d.shape} differ")
    p = sample.probabilities()
    inner = np.einsum("ij,ij->i", g, d)
    ng, nd = np.linalg.norm(g, axis=1), np.linalg.norm(d, axis=1)
    eg2, ed2 = _expect(p, ng * ng), _expect(p, nd * nd)
    product = _expect(p, ng * nd)
    return {
        "inner": _expect(p, inner),
        "abs_inner": _expect(p, np.abs(inner)),
        "norm_product": product,
        "sqrt_moments": math.sqrt(eg2 * ed2),
        "product_sq": product * product,
        "moment_product": eg2 * ed2,
    }


def check_cs_chain(samples: Sequence[PairSample], tolerance: float = CHAIN_TOLERANCE,
                   min_trials: int = 100) -> BoundTrialReport:
    if len(samples) < min_trials:
        raise ContractError(f"check_cs_chain needs >= {min_trials} trials, got {len(samples)}")
    report = BoundTrialReport("cs_chain")
    pairs = [("inner", "abs_inner"), ("abs_inner", "norm_product"),
             ("norm_product", "sqrt_moments"), ("product_sq", "moment_product")]
    for sample in samples:
        links = chain_links(sample)
        report.trials += 1
        excess = max(_relative_excess(links[a], links[b]) for a, b in pairs)
        report.record(excess, excess > tolerance)
        report.links.append(links)
    return report


def random_pair_sample(rng: np.random.Generator, outcomes: int = 8, dim: int = 12) -> PairSample:
    kind = rng.integers(4)
    g = rng.standard_normal((outcomes, dim)) * rng.uniform(0.1, 10.0)
    if kind == 0:
        d = g.copy()
    elif kind == 1:
        d = rng.standard_normal((outcomes, dim)) * rng.uniform(0.01, 1.0)
    elif kind == 2:
        d = -g * rng.uniform(0.1, 2.0)
    else:
        d = g * rng.uniform(0.1, 2.0) + 0.1 * rng.standard_normal((outcomes, dim))
    return PairSample(g, d, rng.dirichlet(np.ones(outcomes)))


def run_cs_suite(trials: int = 1000, seed: int = 0) -> BoundTrialReport:
    rng = np.random.default_rng(seed)
    return check_cs_chain([random_pair_sample(rng) for _ in range(trials)], min_trials=min(trials, 100))


# -----------------------------------------------------------------------------
# Mixture inequality
# -----------------------------------------------------------------------------
@dataclass
class MixtureSpec:
    """Old and new task distributions as finite pmfs over dZ values."""
    weights: MixtureWeights
    old_probs: np.ndarray
    old_values: np.ndarray
    new_probs: np.ndarray
    new_values: np.ndarray

    def __post_init__(self):
        for name in ("old_probs", "old_values", "new_probs", "new_values"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        for probs, values, tag in ((self.old_probs, self.old_values, "old"), (self.new_probs, self.new_values, "new")):
            if probs.shape != values.shape:
                raise ContractError(f"{tag}: {probs.size} probabilities for {values.size} values")
            if np.any(probs < 0) or not math.isclose(math.fsum(probs), 1.0, abs_tol=1e-12):
                raise ContractError(f"{tag}: probabilities must be non-negative and sum to 1")

    @classmethod
    def from_classes(cls, weights: MixtureWeights,
                     old: Sequence[Tuple[float, np.ndarray, np.ndarray]],
                     new: Sequence[Tuple[float, np.ndarray, np.ndarray]]) -> "MixtureSpec":
        """Each entry is (class prior, conditional pmf, dZ values) within the old or new label set."""
        def flatten(parts):
            probs = np.concatenate([prior * np.asarray(p, float) for prior, p, _ in parts])
            values = np.concatenate([np.asarray(v, float) for _, _, v in parts])
            return probs, values
        op, ov = flatten(old)
        np_, nv = flatten(new)
        return cls(weights, op, ov, np_, nv)

    def mixture(self) -> Tuple[np.ndarray, np.ndarray]:
        probs = np.concatenate([self.weights.phi_old * self.old_probs, self.weights.phi_new * self.new_probs])
        return probs, np.concatenate([self.old_values, self.new_values])


def check_proposition1(specs: Union[MixtureSpec, Sequence[MixtureSpec]],
                       tolerance: float = IDENTITY_TOLERANCE) -> BoundTrialReport:
    if isinstance(specs, MixtureSpec):
        specs = [specs]
    report = BoundTrialReport("proposition1")
    for spec in specs:
        if np.any(spec.old_values < 0) or np.any(spec.new_values < 0):
            raise ContractError("negative dZ value: the discrepancy must be a squared norm")
        e_old = _expect(spec.old_probs, spec.old_values)
        e_new = _expect(spec.new_probs, spec.new_values)
        lower = spec.weights.phi_old * e_old
        split = lower + spec.weights.phi_new * e_new
        e_mix = _expect(*spec.mixture())
        scale = max(1.0, abs(e_mix))
        identity = abs(split - e_mix) / scale
        bound = (lower - e_mix) / scale
        report.trials += 1
        report.record(max(identity, bound), identity > tolerance or bound > tolerance)
        report.links.append({"old_term": lower, "split": split, "mixture": e_mix})
    return report


def random_mixture(rng: np.random.Generator) -> MixtureSpec:
    def side(n_classes):
        priors = rng.dirichlet(np.ones(n_classes))
        parts = []
        for prior in priors:
            support = int(rng.integers(1, 6))
            values = rng.exponential(rng.uniform(0.1, 5.0), size=support)
            if rng.random() < 0.1:
                values[:] = 0.0
            parts.append((prior, rng.dirichlet(np.ones(support)), values))
        return parts
    phi = float(rng.choice([0.0, 1.0, rng.uniform()], p=[0.05, 0.05, 0.9]))
    return MixtureSpec.from_classes(MixtureWeights(phi), side(int(rng.integers(1, 5))), side(int(rng.integers(1, 5))))


def run_proposition1_suite(trials: int = 1000, seed: int = 0) -> BoundTrialReport:
    rng = np.random.default_rng(seed)
    return check_proposition1([random_mixture(rng) for _ in range(trials)])


# -----------------------------------------------------------------------------
# Importance bound link
# -----------------------------------------------------------------------------
def channel_bound_link(grads: np.ndarray, deltas: np.ndarray,
                       importance: Optional[float] = None) -> Tuple[float, float]:
    """
    (E<g,d>)^2 and E||g||^2 E||d||^2 over the example axis. When `importance`
    is given it replaces E||g||^2.
    """
    g = np.asarray(grads, dtype=np.float64).reshape(grads.shape[0], -1)
    d = np.asarray(deltas, dtype=np.float64).reshape(deltas.shape[0], -1)
    n = g.shape[0]
    inner = math.fsum(np.einsum("ij,ij->i", g, d)) / n
    eg2 = math.fsum(np.sum(g * g, axis=1)) / n if importance is None else float(importance)
    ed2 = math.fsum(np.sum(d * d, axis=1)) / n
    return inner * inner, eg2 * ed2


@dataclass
class BoundLinkFixture:
    teacher: IncrementalNet
    student: IncrementalNet
    images: np.ndarray
    targets: np.ndarray


def check_importance_bound_link(fixture: BoundLinkFixture, tolerance: float = CHAIN_TOLERANCE) -> BoundTrialReport:
    """Per tapped channel: squared first-order loss change <= importance-weighted discrepancy."""
    teacher, student = fixture.teacher, fixture.student
    grads = tap_gradients(teacher, fixture.images, fixture.targets)
    table = estimate(teacher, fixture.images, fixture.targets)
    n = len(fixture.images)
    t_taps = teacher.eval().forward(fixture.images, update_stats=False).taps
    s_taps = student.eval().forward(fixture.images, update_stats=False).taps
    report = BoundTrialReport("importance_link")
    for li, (t_tap, s_tap) in enumerate(zip(t_taps, s_taps)):
        delta = s_tap.maps.data - t_tap.maps.data
        for c in range(t_tap.channels):
            lhs, rhs = channel_bound_link(grads[li][:, c], delta[:, c], table.raw[li][c] / n)
            excess = _relative_excess(lhs, rhs)
            report.trials += 1
            report.record(excess, excess > tolerance)
            report.links.append({"layer": t_tap.layer, "channel": c, "lhs": lhs, "rhs": rhs})
    return report


def random_bound_link_fixture(seed: int, scale: float = 0.05) -> BoundLinkFixture:
    rng = np.random.default_rng(seed)
    teacher = IncrementalNet(in_channels=1, channels=(3, 4), proxies_per_class=2,
                             seed=int(rng.integers(2**31)))
    teacher.grow_head(3, rng)
    teacher.eval()
    student = copy.deepcopy(teacher)
    for p in student.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    student.head.renormalize()
    images = rng.uniform(0.0, 1.0, size=(6, 1, 8, 8))
    targets = rng.integers(0, 3, size=6)
    return BoundLinkFixture(teacher, student, images, targets)


def run_importance_link_suite(trials: int = 100, seed: int = 0) -> BoundTrialReport:
    merged = BoundTrialReport("importance_link")
    for i in range(trials):
        part = check_importance_bound_link(random_bound_link_fixture(derive_seed(seed, i)))
        merged.trials += part.trials
        merged.violations += part.violations
        merged.max_slack = max(merged.max_slack, part.max_slack)
    return merged
