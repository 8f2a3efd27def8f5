"""MFGAT and baseline graph classifiers built on :mod:`mfgat.autodiff`.

Parameters live in a flat ``dict[str, numpy.ndarray]`` (``ModelParams``).
Weights are stored ``d_out x d_in`` and applied as ``X @ W.T`` to the
``n x d_in`` node matrix.  Names used by the MFGAT family::

    view.{j}.weight, view.{j}.bias          per-view affine transform
    agg.weight                              view weights (1 x m, or m x h per-dimension)
    fgat.{l}.{s}.conv.{k}.weight / .att     GAT head k of sub-module s in layer l
    fgat.{l}.{s}.linear.weight / .bias
    fgat.{l}.{s}.norm.gamma / .beta
    proj.{j}.weight, proj.{j}.bias          view re-projection after the shared stack
    readout.score.{j}, readout.fusion       multi-view weighted-sum pooling
    head.weight, head.bias                  classifier

``fgat`` is the single-view member of the family: it has ``view.0`` as its
input embedding and no ``agg``/``proj`` parameters.  An ``mfgat`` model with
one view, ``agg.weight == 1`` and an identity ``proj.0`` computes exactly the
same logits.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tape, Var
from .datasets import GraphRecord

ModelParams = dict  # str -> np.ndarray

MODEL_KINDS = ("mfgat", "fgat", "gat", "gcn", "sage")
ACTIVATIONS = ("elu", "relu", "identity")
CHECKPOINT_FORMAT = "mfgat-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mfgat"
    in_dim: int = 1
    num_classes: int = 2
    num_views: int = 3
    hidden_dim: int = 64
    num_layers: int = 2
    dropout: float = 0.1
    leaky_slope: float = 0.2
    heads: int = 1
    activation: str = "elu"
    norm_eps: float = 1e-5
    unified_path: bool = True
    view_weighting: str = "scalar"
    rescale_dropout: bool = True

    def __post_init__(self):
        if self.kind in ("gat", "gcn", "sage"):
            # baselines read the raw features as their single view
            object.__setattr__(self, "num_views", 1)
        self.validate()

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError("kind", f"must be one of {MODEL_KINDS}, got {self.kind!r}")
        for name in ("in_dim", "num_views", "hidden_dim", "num_layers", "heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"must be >= 2, got {self.num_classes}")
        if self.kind == "fgat" and self.num_views != 1:
            raise ConfigError("num_views", "the fgat variant has exactly one view")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", f"must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope", f"must lie in (0, 1), got {self.leaky_slope}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError("activation", f"must be one of {ACTIVATIONS}")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps", "must be positive")
        if self.view_weighting not in ("scalar", "vector"):
            raise ConfigError("view_weighting", "must be 'scalar' or 'vector'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Declared shape of every parameter, in canonical order."""
    c = config
    d, h, m, C, K = c.in_dim, c.hidden_dim, c.num_views, c.num_classes, c.heads
    shapes: dict[str, tuple[int, int]] = {}
    if c.kind in ("mfgat", "fgat"):
        for j in range(m):
            shapes[f"view.{j}.weight"] = (h, d)
            shapes[f"view.{j}.bias"] = (1, h)
        if c.kind == "mfgat" and c.unified_path:
            shapes["agg.weight"] = (1, m) if c.view_weighting == "scalar" else (m, h)
        for layer in range(c.num_layers):
            for s in range(2):
                p = f"fgat.{layer}.{s}"
                for k in range(K):
                    shapes[f"{p}.conv.{k}.weight"] = (h, h)
                    shapes[f"{p}.conv.{k}.att"] = (1, 2 * h)
                shapes[f"{p}.linear.weight"] = (h, h)
                shapes[f"{p}.linear.bias"] = (1, h)
                shapes[f"{p}.norm.gamma"] = (1, h)
                shapes[f"{p}.norm.beta"] = (1, h)
        if c.kind == "mfgat" and c.unified_path:
            for j in range(m):
                shapes[f"proj.{j}.weight"] = (h, h)
                shapes[f"proj.{j}.bias"] = (1, h)
        for j in range(m):
            shapes[f"readout.score.{j}"] = (1, h)
        shapes["readout.fusion"] = (1, m * h)
        shapes["head.weight"] = (C, m * h)
    else:
        prev = d
        for layer in range(c.num_layers):
            if c.kind == "gat":
                for k in range(K):
                    shapes[f"gat.{layer}.conv.{k}.weight"] = (h, prev)
                    shapes[f"gat.{layer}.conv.{k}.att"] = (1, 2 * h)
            elif c.kind == "gcn":
                shapes[f"gcn.{layer}.weight"] = (h, prev)
            else:
                shapes[f"sage.{layer}.self"] = (h, prev)
                shapes[f"sage.{layer}.neigh"] = (h, prev)
            prev = h
        shapes["head.weight"] = (C, h)
    shapes["head.bias"] = (1, C)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count.

    MFGAT (unified path, scalar view weights)::

        m(hd + h) + m + 2L(K(h^2 + 2h) + h^2 + 3h) + m(h^2 + h) + 2mh + C(mh + 1)

    The fgat variant drops the ``m`` view weights and the ``m(h^2 + h)``
    re-projections; without the unified path those two terms vanish as well.
    Baselines: per layer ``K(h d_prev + 2h)`` (gat), ``h d_prev`` (gcn) or
    ``2 h d_prev`` (sage), plus ``C(h + 1)``.
    """
    c = config
    d, h, m, C, K, L = c.in_dim, c.hidden_dim, c.num_views, c.num_classes, c.heads, c.num_layers
    if c.kind in ("mfgat", "fgat"):
        total = m * (h * d + h) + 2 * L * (K * (h * h + 2 * h) + h * h + 3 * h) + 2 * m * h + C * (m * h + 1)
        if c.kind == "mfgat" and c.unified_path:
            total += (m if c.view_weighting == "scalar" else m * h) + m * (h * h + h)
        return total
    dims = [d] + [h] * (L - 1)
    per = {"gat": lambda p: K * (h * p + 2 * h), "gcn": lambda p: h * p, "sage": lambda p: 2 * h * p}[c.kind]
    return sum(per(p) for p in dims) + C * (h + 1)


def _init_value(name: str, shape: tuple[int, int], rng: RngStream) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("readout.score"):
        return np.zeros(shape)
    if name in ("agg.weight", "readout.fusion") or leaf == "gamma":
        return np.ones(shape)
    if leaf in ("bias", "beta"):
        return np.zeros(shape)
    fan_out, fan_in = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def build_model(config: ModelConfig, rng: RngStream | int) -> ModelParams:
    """Allocate and initialise every parameter of ``config``.

    Weights are Glorot-uniform, biases and ``beta`` zero, ``gamma``, view
    weights and fusion weights one, readout scoring vectors zero.
    """
    config.validate()
    if not isinstance(rng, RngStream):
        rng = RngStream(int(rng))
    return {name: _init_value(name, shape, rng.child("init", name))
            for name, shape in param_shapes(config).items()}


def identity_projection(params: ModelParams, view: int = 0) -> ModelParams:
    """Copy of ``params`` with ``proj.{view}`` set to the identity map."""
    out = {k: v.copy() for k, v in params.items()}
    h = out[f"proj.{view}.weight"].shape[0]
    out[f"proj.{view}.weight"] = np.eye(h)
    out[f"proj.{view}.bias"] = np.zeros((1, h))
    return out


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Var, weight: Var, bias: Var | None = None) -> Var:
    y = ad.matmul(x, ad.transpose(weight))
    return y if bias is None else ad.add(y, bias)


def _activate(x: Var, kind: str) -> Var:
    if kind == "elu":
        return ad.elu(x)
    if kind == "relu":
        return ad.relu(x)
    return x


def transform_views(x: Var, transforms: Sequence[tuple[Var, Var]]) -> list[Var]:
    """Row ``i`` of view ``j`` is ``W_j x_i + b_j``."""
    if not transforms:
        raise ValueError("need at least one view transform")
    outs = {w.shape[0] for w, _ in transforms}
    if len(outs) != 1:
        raise ad.ShapeError(f"view transforms disagree on output width: {sorted(outs)}")
    for w, b in transforms:
        if w.shape[1] != x.shape[1]:
            raise ad.ShapeError(f"view weight expects width {w.shape[1]}, input has {x.shape[1]}")
    return [linear(x, w, b) for w, b in transforms]


def unify_views(views: Sequence[Var], weights: Var, mode: str = "scalar") -> Var:
    """Weighted sum of views: ``sum_j w_j * x^j``.

    ``mode='scalar'`` takes ``weights`` as ``1 x m``; ``'vector'`` as ``m x h``
    (one weight per view and feature).
    """
    m = len(views)
    if m == 0:
        raise ValueError("no views to unify")
    if len({v.shape for v in views}) != 1:
        raise ad.ShapeError("views differ in shape")
    expected = (1, m) if mode == "scalar" else (m, views[0].shape[1])
    if weights.shape != expected:
        raise ad.ShapeError(f"view weights must be {expected}, got {weights.shape}")
    out = None
    for j, v in enumerate(views):
        w = ad.getitem(weights, 0, j) if mode == "scalar" else ad.getitem(weights, j)
        term = ad.mul(v, w)
        out = term if out is None else ad.add(out, term)
    return out


def attention_coefficients(z: Var, att: Var, mask: np.ndarray, slope: float) -> Var:
    """``alpha_ij = softmax_j LeakyReLU(a^T [z_i || z_j])`` over ``mask[i]``.

    The concatenation is split: ``a^T [z_i || z_j] = a_1 . z_i + a_2 . z_j``.
    """
    d = z.shape[1]
    if att.shape != (1, 2 * d):
        raise ad.ShapeError(f"attention vector must be 1x{2 * d}, got {att.shape}")
    own = ad.matmul(z, ad.transpose(ad.getitem(att, cols=slice(0, d))))
    other = ad.matmul(z, ad.transpose(ad.getitem(att, cols=slice(d, 2 * d))))
    scores = ad.add(own, ad.transpose(other))
    return ad.masked_softmax(ad.leaky_relu(scores, slope), mask)


def gat_conv(x: Var, mask: np.ndarray, heads: Sequence[tuple[Var, Var]], slope: float = 0.2,
             activation: str = "elu") -> Var:
    """Attention-weighted neighbour aggregation; multiple heads are averaged."""
    out = None
    for weight, att in heads:
        z = linear(x, weight)
        alpha = attention_coefficients(z, att, mask, slope)
        agg = ad.matmul(alpha, z)
        out = agg if out is None else ad.add(out, agg)
    if len(heads) > 1:
        out = ad.scale(out, 1.0 / len(heads))
    return _activate(out, activation)


def _heads(P: Mapping[str, Var], prefix: str, k: int) -> list[tuple[Var, Var]]:
    return [(P[f"{prefix}.{i}.weight"], P[f"{prefix}.{i}.att"]) for i in range(k)]


def fgat_submodule_forward(x: Var, mask: np.ndarray, P: Mapping[str, Var], prefix: str,
                           config: ModelConfig, train: bool = False,
                           rng: RngStream | None = None) -> Var:
    """``LayerNorm(x + Dropout(Linear(GatConv(x))))``."""
    c = gat_conv(x, mask, _heads(P, f"{prefix}.conv", config.heads), config.leaky_slope,
                 config.activation)
    f = linear(c, P[f"{prefix}.linear.weight"], P[f"{prefix}.linear.bias"])
    f = ad.dropout(f, config.dropout, train, rng, rescale=config.rescale_dropout)
    return ad.layer_norm(ad.add(x, f), P[f"{prefix}.norm.gamma"], P[f"{prefix}.norm.beta"],
                         config.norm_eps)


def fgat_layer_forward(x: Var, mask: np.ndarray, P: Mapping[str, Var], layer: int,
                       config: ModelConfig, train: bool = False,
                       rng: RngStream | None = None) -> Var:
    for s in range(2):
        x = fgat_submodule_forward(x, mask, P, f"fgat.{layer}.{s}", config, train, rng)
    return x


def fgat_stack(x: Var, mask: np.ndarray, P: Mapping[str, Var], config: ModelConfig,
               train: bool = False, rng: RngStream | None = None) -> Var:
    for layer in range(config.num_layers):
        x = fgat_layer_forward(x, mask, P, layer, config, train, rng)
    return x


def multi_view_readout(views: Sequence[Var], scores: Sequence[Var], fusion: Var) -> Var:
    """Per view, softmax node weights from ``score_j . x_i`` and a weighted node sum;
    the view summaries are concatenated and scaled elementwise by ``fusion``.
    """
    if not views:
        raise ValueError("readout needs at least one view")
    if len(scores) != len(views):
        raise ad.ShapeError(f"{len(scores)} scoring vectors for {len(views)} views")
    n = views[0].shape[0]
    if n < 1:
        raise ValueError("readout of an empty graph")
    everyone = np.ones(n, dtype=bool)
    summaries = []
    for x, a in zip(views, scores):
        s = ad.transpose(ad.matmul(x, ad.transpose(a)))
        w = ad.masked_softmax(s, everyone)
        summaries.append(ad.matmul(w, x))
    z = summaries[0] if len(summaries) == 1 else ad.hconcat(summaries)
    if fusion.shape != z.shape:
        raise ad.ShapeError(f"fusion weights must be {z.shape}, got {fusion.shape}")
    return ad.mul(z, fusion)


def gcn_conv(x: Var, propagation: np.ndarray, weight: Var) -> Var:
    """``ReLU(D^-1/2 (A+I) D^-1/2 X W)``; ``propagation`` is the normalised matrix."""
    return ad.relu(ad.matmul(x.tape.constant(propagation), linear(x, weight)))


def sage_conv(x: Var, neighbor_mean: np.ndarray, w_self: Var, w_neigh: Var) -> Var:
    """``ReLU(W_self x_i + W_neigh mean_{j in N(i)} x_j)``; no neighbours -> zero term."""
    nb = ad.matmul(x.tape.constant(neighbor_mean), x)
    return ad.relu(ad.add(linear(x, w_self), linear(nb, w_neigh)))


# ---------------------------------------------------------------------------
# full models


def node_readout_inputs(graph: GraphRecord, P: Mapping[str, Var], config: ModelConfig,
                        train: bool = False, rng: RngStream | None = None) -> list[Var]:
    """Final per-view node states of an MFGAT-family model (input of the readout)."""
    c = config
    tape = next(iter(P.values())).tape
    x = tape.constant(graph.x)
    mask = graph.attention_mask
    views = transform_views(x, [(P[f"view.{j}.weight"], P[f"view.{j}.bias"])
                                for j in range(c.num_views)])
    if c.kind == "fgat":
        return [fgat_stack(views[0], mask, P, c, train, rng)]
    if c.unified_path:
        h = fgat_stack(unify_views(views, P["agg.weight"], c.view_weighting), mask, P, c, train, rng)
        return [linear(h, P[f"proj.{j}.weight"], P[f"proj.{j}.bias"]) for j in range(c.num_views)]
    return [fgat_stack(v, mask, P, c, train, rng) for v in views]


def classify_forward(graph: GraphRecord, P: Mapping[str, Var], config: ModelConfig,
                     train: bool = False, rng: RngStream | None = None) -> Var:
    """Logits (``1 x C``) for one graph; ``P`` are the parameter leaves on a tape."""
    c = config
    if graph.x.shape[1] != c.in_dim:
        raise ad.ShapeError(f"graph has {graph.x.shape[1]} features, model expects {c.in_dim}")
    if c.kind in ("mfgat", "fgat"):
        states = node_readout_inputs(graph, P, c, train, rng)
        z = multi_view_readout(states, [P[f"readout.score.{j}"] for j in range(c.num_views)],
                               P["readout.fusion"])
    else:
        tape = next(iter(P.values())).tape
        h = tape.constant(graph.x)
        for layer in range(c.num_layers):
            if c.kind == "gat":
                h = gat_conv(h, graph.attention_mask, _heads(P, f"gat.{layer}.conv", c.heads),
                             c.leaky_slope, c.activation)
            elif c.kind == "gcn":
                h = gcn_conv(h, graph.gcn_propagation, P[f"gcn.{layer}.weight"])
            else:
                h = sage_conv(h, graph.neighbor_mean, P[f"sage.{layer}.self"], P[f"sage.{layer}.neigh"])
            h = ad.dropout(h, c.dropout, train, rng, rescale=c.rescale_dropout)
        z = ad.col_mean(h)
    return linear(z, P["head.weight"], P["head.bias"])


def predict_logits(graph: GraphRecord, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Eval-mode logits as a plain array (no gradients recorded)."""
    tape = Tape()
    return classify_forward(graph, tape.params(params, requires_grad=False), config).value


def loss_and_grads(graph: GraphRecord, params: ModelParams, config: ModelConfig,
                   train: bool = True, rng: RngStream | None = None
                   ) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Cross-entropy of one graph plus gradients for every parameter."""
    tape = Tape()
    logits = classify_forward(graph, tape.params(params), config, train, rng)
    loss = ad.cross_entropy_loss(logits, graph.label)
    grads = tape.backward(loss)
    return float(loss.value[0, 0]), logits.value, grads


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: os.PathLike | str, config: ModelConfig, params: ModelParams,
                    meta: Mapping | None = None) -> Path:
    """Write an ``.npz`` checkpoint.

    Layout: one float64 array per parameter under its own name, plus
    ``__meta__``, a JSON string holding ``format``, ``version``, ``config``,
    the parameter shapes and any extra ``meta`` (seed, split, dataset).
    """
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "meta": dict(meta or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(header, sort_keys=True)),
                 **{k: np.asarray(v, dtype=np.float64) for k, v in params.items()})
    return path


def load_checkpoint(path: os.PathLike | str) -> tuple[ModelConfig, ModelParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__meta__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        config = ModelConfig.from_dict(header["config"])
        params = {k: np.array(data[k]) for k in header["shapes"]}
    expected = param_shapes(config)
    for k, shape in expected.items():
        if k not in params or params[k].shape != shape:
            raise ValueError(f"{path}: parameter {k} missing or mis-shaped")
    return config, params, header["meta"]
