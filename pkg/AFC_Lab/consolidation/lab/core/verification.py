"""
The `verify` suites: gradient checks of the objective, the bound checks,
and exhaustive checks of the closed-form helpers.

Every suite returns a BoundTrialReport; a run passes iff every suite does.
"""

import copy
import logging
import math
from typing import Callable, Dict, List

import numpy as np

from consolidation.core import tensor as T
from consolidation.core.boundslab import (BoundTrialReport, PairSample, chain_links, run_cs_suite,
                                          run_importance_link_suite, run_proposition1_suite, run_taylor_suite)
from consolidation.core.gradcheck import DEFAULT_TOLERANCE, check_gradients
from consolidation.core.importance import normalize_layer
from consolidation.core.losses import classification_loss, discrepancy_loss, lambda_t, total_loss
from consolidation.core.memory import herd_select
from consolidation.core.network import DEFAULT_DELTA, IncrementalNet
from consolidation.core.seeding import derive_seed

from .constants import VERIFY_TRIALS

logger = logging.getLogger(__name__)

ALIGNED_TOLERANCE = 1e-12


def _trials(suite: str, quick: bool) -> int:
    full, short = VERIFY_TRIALS[suite]
    return short if quick else full


# ---------- gradient checks ----------
def _primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (function of the inputs, input arrays)."""
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    img, ker = rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    weights = rng.standard_normal((2, 3, 6, 6))
    return {
        "add": (lambda x, y: T.tsum(T.add(x, y) * b), (a, rng.standard_normal(4))),
        "sub": (lambda x, y: T.tsum(T.sub(x, y) * b), (a, b)),
        "mul": (lambda x, y: T.tsum(T.mul(x, y)), (a, b)),
        "div": (lambda x, y: T.tsum(T.div(x, y)), (a, pos)),
        "exp_log": (lambda x: T.tsum(T.log(T.exp(x) + 1.0)), (a,)),
        "sqrt": (lambda x: T.tsum(T.sqrt(x)), (pos,)),
        "softplus": (lambda x: T.tsum(T.softplus(x) * b), (a,)),
        "softmax": (lambda x: T.tsum(T.softmax(x, axis=1) * b), (a,)),
        "matmul": (lambda x, y: T.tsum(T.matmul(x, T.transpose(y))), (a, b)),
        "mean_axis": (lambda x: T.tsum(T.mean(x, axis=0) * b[0]), (a,)),
        "frobenius_norm": (lambda x: T.tsum(T.frobenius_norm(x, axis=1)), (a,)),
        "take_rows": (lambda x: T.tsum(T.take_rows(x, [2, 0, 2]) * b), (a,)),
        "conv2d": (lambda x, w: T.tsum(T.conv2d(x, w, stride=1, padding=1) * weights)
                   + T.tsum(T.conv2d(x, w, stride=2, padding=1) * T.conv2d(x, w, stride=2, padding=1)),
                   (img, ker)),
        "avg_pool": (lambda x: T.tsum(T.avg_pool(x, 2) * T.avg_pool(x, 2)), (img,)),
    }


def gradient_fixture(seed: int, include_true_class: bool = True):
    """
    Random softplus teacher/student pair and the total loss builder of the student.

    With the true class left out of the denominator the margin is at least
    log 2 - 2 eta + eta delta for cosine scores over three classes, so
    delta = 2.5 keeps the clamp inactive.
    """
    rng = np.random.default_rng(seed)
    delta = DEFAULT_DELTA if include_true_class else 2.5
    student = IncrementalNet(in_channels=2, channels=(3, 4), activation="softplus", delta=delta,
                             proxies_per_class=2, seed=int(rng.integers(2**31)))
    student.grow_head(2, rng)
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False).eval()
    student.grow_head(1, rng)
    for p in student.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    student.head.renormalize()
    images = rng.uniform(0.0, 1.0, size=(4, 2, 8, 8))
    labels = rng.integers(0, 3, size=4)
    importance = [rng.uniform(0.0, 2.0, size=c) for c in student.tap_channels()]
    lam = lambda_t(3, 2)

    def build_loss():
        out = student.forward(images, update_stats=False)
        t_out = teacher.forward(images, update_stats=False)
        cls = classification_loss(out.scores, labels, student.head.eta, student.head.delta,
                                  include_true_class=include_true_class)
        disc = discrepancy_loss(out.taps, t_out.taps, importance)
        return total_loss(cls, disc, 4.0, lam).graph

    return build_loss, student.parameters()


def run_gradient_suite(trials: int, seed: int = 0) -> BoundTrialReport:
    report = BoundTrialReport("gradient_check")
    rng = np.random.default_rng(seed)
    for name, (fn, arrays) in _primitive_cases(rng).items():
        inputs = [T.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in arrays]
        result = check_gradients(lambda: fn(*inputs), inputs, rng=rng)
        report.trials += 1
        report.record(result.max_rel_error, not result.passed(DEFAULT_TOLERANCE))
        report.links.append({"case": name, "max_rel_error": result.max_rel_error})
    for i in range(trials):
        # alternate the two denominator forms
        build_loss, params = gradient_fixture(derive_seed(seed, i), include_true_class=i % 2 == 0)
        result = check_gradients(build_loss, params, rng=np.random.default_rng(i))
        report.trials += 1
        report.record(result.max_rel_error, not result.passed(DEFAULT_TOLERANCE))
        if not result.passed(DEFAULT_TOLERANCE):
            logger.warning("Gradient mismatch on fixture %d: %s", i, result.worst)
    return report


# ---------- closed forms ----------
def run_lambda_suite(max_classes: int = 128) -> BoundTrialReport:
    """Every (n_prev, n_t) pair with n_t <= max_classes: exact formula, monotone in n_prev."""
    report = BoundTrialReport("lambda_t")
    for n_t in range(1, max_classes + 1):
        previous = 0.0
        for n_prev in range(0, n_t):
            value = lambda_t(n_t, n_prev)
            expected = math.sqrt(n_t / (n_t - n_prev))
            report.trials += 1
            ok = value == expected and value >= 1.0 and value > previous
            report.record(abs(value - expected), not ok)
            previous = value
    return report


def greedy_oracle(embeddings: np.ndarray, m: int) -> List[int]:
    """Plain-loop greedy herding, used as the reference for herd_select."""
    n, d = embeddings.shape
    mu = [math.fsum(embeddings[:, j]) / n for j in range(d)]
    chosen: List[int] = []
    running = [0.0] * d
    for step in range(1, m + 1):
        best, best_dist = -1, math.inf
        for i in range(n):
            if i in chosen:
                continue
            dist = math.sqrt(sum((mu[j] - (running[j] + embeddings[i, j]) / step) ** 2 for j in range(d)))
            if dist < best_dist:
                best, best_dist = i, dist
        chosen.append(best)
        running = [running[j] + embeddings[best, j] for j in range(d)]
    return chosen


def run_herding_suite(trials: int, seed: int = 0) -> BoundTrialReport:
    report = BoundTrialReport("herding")
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        n = int(rng.integers(1, 11))
        emb = rng.standard_normal((n, int(rng.integers(1, 5))))
        full = herd_select(emb, n)
        report.trials += 1
        mismatch = full != greedy_oracle(emb, n)
        prefix_broken = any(herd_select(emb, m1) != full[:m1] for m1 in range(1, n + 1))
        report.record(float(mismatch or prefix_broken), mismatch or prefix_broken)
    return report


def run_normalization_suite(trials: int, seed: int = 0) -> BoundTrialReport:
    """Per-layer mean of the normalised table is 1; sum and mean accumulation normalise identically."""
    report = BoundTrialReport("importance_normalization")
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        channels = int(rng.integers(1, 65))
        n = 2 ** int(rng.integers(0, 11))
        summed = rng.exponential(1.0, size=channels) * n
        from_sum = normalize_layer(summed)
        from_mean = normalize_layer(summed / n)
        mean_error = abs(math.fsum(from_sum) / channels - 1.0)
        report.trials += 1
        report.record(mean_error, mean_error > 1e-9 or not np.array_equal(from_sum, from_mean))
    zero = normalize_layer(np.zeros(4))
    report.trials += 1
    report.record(0.0, not np.array_equal(zero, np.ones(4)))
    return report


def run_cs_with_equality(trials: int, seed: int = 0) -> BoundTrialReport:
    """The chain, plus equality in the last two links when the delta is a fixed multiple of the gradient."""
    report = run_cs_suite(trials, seed)
    rng = np.random.default_rng(seed + 1)
    g = rng.standard_normal((6, 10))
    links = chain_links(PairSample(g, 2.5 * g))
    gap = abs(links["norm_product"] - links["sqrt_moments"]) / links["sqrt_moments"]
    report.trials += 1
    report.record(-gap, gap > ALIGNED_TOLERANCE)
    return report


# ---------- driver ----------
def suites(quick: bool = False, seed: int = 0) -> Dict[str, Callable[[], BoundTrialReport]]:
    return {
        "gradient_check": lambda: run_gradient_suite(_trials("gradient_check", quick), seed),
        "cs_chain": lambda: run_cs_with_equality(_trials("cs_chain", quick), seed),
        "proposition1": lambda: run_proposition1_suite(_trials("proposition1", quick), seed),
        "taylor": lambda: run_taylor_suite(_trials("taylor", quick), seed),
        "importance_link": lambda: run_importance_link_suite(_trials("importance_link", quick), seed),
        "lambda_t": lambda: run_lambda_suite(_trials("lambda_t", quick)),
        "herding": lambda: run_herding_suite(_trials("herding", quick), seed),
        "importance_normalization": lambda: run_normalization_suite(_trials("importance_normalization", quick), seed),
    }


def run_verification(quick: bool = False, seed: int = 0) -> List[BoundTrialReport]:
    reports = []
    for name, run in suites(quick, seed).items():
        report = run()
        status = "ok" if report.passed else "FAILED"
        logger.info("Suite %-24s %s (%d trials, %d violations, %d excluded)",
                    name, status, report.trials, report.violations, report.excluded)
        reports.append(report)
    return reports
