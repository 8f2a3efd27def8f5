"""Finite-difference checks for every primitive and for whole models."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import RngStream, Tape, Var
from .datasets import GraphRecord

PRIMITIVE_TOL = 1e-6
END_TO_END_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _away_from_zero(rng: RngStream, shape) -> np.ndarray:
    # keeps kinks of relu/leaky/elu further than h from every sample
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return sign * (0.1 + rng.random(shape))


def _weighted(out: Var, weights: np.ndarray) -> Var:
    return ad.sum_all(ad.mul(out, out.tape.constant(weights)))


def primitive_cases(seed: int = 0) -> list[tuple[str, Callable, dict]]:
    """(name, f(tape, leaves), params) for each differentiable primitive."""
    rng = RngStream(seed).child("gradcheck", "primitives")
    r = lambda *s: rng.normal(s)  # noqa: E731
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    R34, R45 = r(3, 4), r(4, 5)
    cases = [
        ("add", lambda t, p: _weighted(ad.add(p["a"], p["b"]), R34), {"a": r(3, 4), "b": r(1, 4)}),
        ("sub", lambda t, p: _weighted(ad.sub(p["a"], p["b"]), R34), {"a": r(3, 4), "b": r(3, 1)}),
        ("mul", lambda t, p: _weighted(ad.mul(p["a"], p["b"]), R34), {"a": r(3, 4), "b": r(1, 4)}),
        ("mul_scalar", lambda t, p: _weighted(ad.mul(p["a"], p["s"]), R34), {"a": r(3, 4), "s": r(1, 1)}),
        ("scale", lambda t, p: _weighted(ad.scale(p["a"], -1.7), R34), {"a": r(3, 4)}),
        ("matmul", lambda t, p: _weighted(ad.matmul(p["a"], p["b"]), R34), {"a": r(3, 5), "b": r(5, 4)}),
        ("transpose", lambda t, p: _weighted(ad.transpose(p["a"]), R34), {"a": r(4, 3)}),
        ("getitem", lambda t, p: _weighted(ad.getitem(p["a"], slice(1, 4), slice(0, 4)), R34), {"a": r(5, 6)}),
        ("hconcat", lambda t, p: _weighted(ad.hconcat([p["a"], p["b"]]), R34), {"a": r(3, 1), "b": r(3, 3)}),
        ("vconcat", lambda t, p: _weighted(ad.vconcat([p["a"], p["b"]]), R34), {"a": r(1, 4), "b": r(2, 4)}),
        ("sum", lambda t, p: ad.sum_all(ad.mul(p["a"], p["a"])), {"a": r(3, 4)}),
        ("row_sum", lambda t, p: _weighted(ad.row_sum(p["a"]), R34[:, :1]), {"a": r(3, 4)}),
        ("col_mean", lambda t, p: _weighted(ad.col_mean(p["a"]), R34[:1]), {"a": r(3, 4)}),
        ("mean", lambda t, p: ad.mean(ad.mul(p["a"], p["a"])), {"a": r(3, 4)}),
        ("relu", lambda t, p: _weighted(ad.relu(p["a"]), R34), {"a": _away_from_zero(rng, (3, 4))}),
        ("leaky_relu", lambda t, p: _weighted(ad.leaky_relu(p["a"], 0.2), R34),
         {"a": _away_from_zero(rng, (3, 4))}),
        ("elu", lambda t, p: _weighted(ad.elu(p["a"]), R34), {"a": _away_from_zero(rng, (3, 4))}),
        ("masked_softmax", lambda t, p: _weighted(ad.masked_softmax(p["a"], mask), R45), {"a": r(4, 5)}),
        ("layer_norm", lambda t, p: _weighted(ad.layer_norm(p["x"], p["g"], p["b"], 1e-5), R34),
         {"x": r(3, 4), "g": r(1, 4), "b": r(1, 4)}),
        ("dropout", lambda t, p: _weighted(ad.dropout(p["a"], 0.4, True, RngStream(seed).child("mask")), R34),
         {"a": r(3, 4)}),
        ("cross_entropy", lambda t, p: ad.cross_entropy_loss(p["z"], 2), {"z": r(1, 4)}),
    ]
    return cases


def random_graph(rng: RngStream, n: int = 6, m: int = 8, d: int = 3, label: int = 0) -> GraphRecord:
    """``n`` nodes, exactly ``m`` distinct undirected edges chosen uniformly."""
    pairs = list(combinations(range(n), 2))
    if m > len(pairs):
        raise ValueError(f"{n} nodes hold at most {len(pairs)} edges")
    pick = rng.permutation(len(pairs))[:m]
    edges = np.array([pairs[i] for i in sorted(pick)], dtype=np.int64).reshape(-1, 2)
    return GraphRecord(rng.normal((n, d)), edges, label)


def model_cases(seed: int = 0, nodes: int = 6, edges: int = 8, hidden: int = 4
                ) -> list[tuple[str, Callable, dict]]:
    """End-to-end cross-entropy of each model kind on a random graph, dropout mask fixed."""
    rng = RngStream(seed).child("gradcheck", "models")
    graph = random_graph(rng, nodes, edges, d=3, label=1)
    configs = {
        "mfgat": mdl.ModelConfig("mfgat", 3, 2, num_views=3, hidden_dim=hidden, dropout=0.3),
        "mfgat_per_view": mdl.ModelConfig("mfgat", 3, 2, num_views=2, hidden_dim=hidden, dropout=0.3,
                                          unified_path=False),
        "mfgat_vector_weights": mdl.ModelConfig("mfgat", 3, 2, num_views=2, hidden_dim=hidden,
                                                view_weighting="vector", heads=2),
        "fgat": mdl.ModelConfig("fgat", 3, 2, num_views=1, hidden_dim=hidden, dropout=0.3),
        "gat": mdl.ModelConfig("gat", 3, 2, hidden_dim=hidden, heads=2),
        "gcn": mdl.ModelConfig("gcn", 3, 2, hidden_dim=hidden),
        "sage": mdl.ModelConfig("sage", 3, 2, hidden_dim=hidden),
    }
    cases = []
    for name, cfg in configs.items():
        params = mdl.build_model(cfg, rng.child(name))
        # move scoring/fusion/view weights off their neutral init so they matter
        for k in params:
            if k.startswith(("readout.", "agg.")):
                params[k] = params[k] + 0.5 * rng.normal(params[k].shape)

        def f(tape: Tape, p, cfg=cfg, name=name):
            logits = mdl.classify_forward(graph, p, cfg, train=True,
                                          rng=RngStream(seed).child("dropout", name))
            return ad.cross_entropy_loss(logits, graph.label)

        cases.append((f"model:{name}", f, params))
    return cases


def run_suite(seed: int = 0, nodes: int = 6, edges: int = 8, hidden: int = 4,
              h: float = 1e-5) -> list[CheckResult]:
    results = []
    for name, f, params in primitive_cases(seed):
        results.append(CheckResult(name, ad.grad_check(f, params, h), PRIMITIVE_TOL))
    for name, f, params in model_cases(seed, nodes, edges, hidden):
        results.append(CheckResult(name, ad.grad_check(f, params, h), END_TO_END_TOL))
    return results
