"""Fusion architectures and their losses.

CentralNet runs one MLP per modality plus a central MLP of matching hidden
widths. Before every central operating layer the central input is a learned
weighted sum::

    s_0 = sum_k a[0][k] * h_k^0                      (aligned raw features)
    s_i = a[i][C] * c_i + sum_k a[i][k] * h_k^i      (i = 1 .. m)
    out = a[m+1][C] * c_out + sum_k a[m+1][k] * logits_k

where ``c_i`` is the central representation produced by the previous
operating layer, ``h_k^i`` the i-th hidden output of modality ``k`` and
``m`` the number of hidden blocks. ``out`` is the model's prediction; the
unimodal logits are extra heads used only by the training loss.

The baselines (unimodal, early, late, GMU) share the same block structure so
that comparisons differ by the fusion mechanism alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import MultimodalBatch, pad_columns
from .errors import ConfigError, ContractError, ShapeError, UnsupportedConfigurationError
from .layers import MLP, DenseLayer, Module, init_params

LOSS_KINDS = ("softmax_ce", "weighted_bce")
SIGMOID_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# fusion weights
# ---------------------------------------------------------------------------


@dataclass
class AlphaLayer:
    """Scalars of one fusion layer. ``central`` is ``None`` at layer 0."""

    central: Tensor | None
    modality: list[Tensor]

    def tensors(self) -> list[Tensor]:
        return ([self.central] if self.central is not None else []) + list(self.modality)

    def raw(self) -> list[float]:
        return [t.item() for t in self.tensors()]

    def sources(self) -> list[str]:
        names = [f"modality_{k + 1}" for k in range(len(self.modality))]
        return (["central"] if self.central is not None else []) + names


class AlphaState(Module):
    """Trainable fusion scalars for layers ``0 .. n_layers - 1``.

    Layer 0 holds one weight per modality, initialised to ``1/n``; every
    later layer holds a central weight plus one per modality, initialised to
    ``1/(n+1)``. The weights are unconstrained.
    """

    def __init__(self, n_modalities: int, n_layers: int):
        if n_modalities < 1 or n_layers < 1:
            raise ContractError(f"need at least one modality and one layer, got {n_modalities}, {n_layers}")
        self.n_modalities = n_modalities
        self.layers: list[AlphaLayer] = []
        for i in range(n_layers):
            if i == 0:
                init = 1.0 / n_modalities
                central = None
            else:
                init = 1.0 / (n_modalities + 1)
                central = Tensor([[init]], requires_grad=True)
            modality = [Tensor([[init]], requires_grad=True) for _ in range(n_modalities)]
            self.layers.append(AlphaLayer(central, modality))

    def own_parameters(self):
        for i, layer in enumerate(self.layers):
            if layer.central is not None:
                yield f"layer{i}.central", layer.central
            for k, t in enumerate(layer.modality):
                yield f"layer{i}.modality_{k + 1}", t

    def snapshot(self) -> list[list[float]]:
        return [layer.raw() for layer in self.layers]

    def set(self, layer: int, central: float | None = None, modality: Sequence[float] | None = None) -> None:
        """Overwrite weights of one layer in place (used to pin reduction patterns)."""
        target = self.layers[layer]
        if central is not None:
            if target.central is None:
                raise ContractError(f"layer {layer} has no central weight")
            target.central.values[0, 0] = central
        if modality is not None:
            if len(modality) != len(target.modality):
                raise ContractError(f"layer {layer} has {len(target.modality)} modality weights")
            for t, v in zip(target.modality, modality):
                t.values[0, 0] = v


def central_fuse(h_central: Tensor | None, h_modalities: Sequence[Tensor], alphas) -> Tensor:
    """Weighted sum of the central and modality representations of one layer.

    ``alphas`` is an :class:`AlphaLayer`, or a plain sequence of numbers laid
    out as ``(central, m_1, ..., m_n)`` when ``h_central`` is given and
    ``(m_1, ..., m_n)`` otherwise.
    """
    if isinstance(alphas, AlphaLayer):
        a_central, a_mod = alphas.central, list(alphas.modality)
    else:
        vals = list(alphas)
        if h_central is not None:
            a_central, a_mod = vals[0], vals[1:]
        else:
            a_central, a_mod = None, vals
    if len(a_mod) != len(h_modalities):
        raise ContractError(f"{len(a_mod)} modality weights for {len(h_modalities)} modalities")
    if a_central is not None and h_central is None:
        raise ContractError("central representation missing for a layer with a central weight")
    if a_central is None and h_central is not None:
        raise ContractError("layer 0 takes no central representation")
    shape = h_modalities[0].shape
    for h in [*h_modalities, *([h_central] if h_central is not None else [])]:
        if h.shape != shape:
            raise ShapeError(f"fusion inputs must share one shape, got {shape} and {h.shape}")

    out = ag.scale(h_central, a_central) if h_central is not None else None
    for h, a in zip(h_modalities, a_mod):
        term = ag.scale(h, a)
        out = term if out is None else ag.add(out, term)
    return out


@dataclass
class LayerShares:
    layer: int
    sources: list[str]
    raw: list[float]
    shares: list[float]
    degenerate: bool = False


def alpha_report(alphas: AlphaState | Sequence[Sequence[float]]) -> list[LayerShares]:
    """Per-layer ``|alpha| / sum |alpha|``; raw values are kept alongside.

    A layer whose weights are all zero gets uniform shares and
    ``degenerate=True``. Plain nested lists are read as layer-0 first, with
    a leading central weight on every later layer.
    """
    report = []
    if isinstance(alphas, AlphaState):
        layers = [(layer.sources(), layer.raw()) for layer in alphas.layers]
    else:
        layers = []
        for i, raw in enumerate(alphas):
            raw = [float(v) for v in raw]
            n_mod = len(raw) if i == 0 else len(raw) - 1
            srcs = ([] if i == 0 else ["central"]) + [f"modality_{k + 1}" for k in range(n_mod)]
            layers.append((srcs, raw))
    for i, (srcs, raw) in enumerate(layers):
        mags = np.abs(raw)
        total = mags.sum()
        if total == 0:
            shares, degenerate = [1.0 / len(raw)] * len(raw), True
        else:
            shares, degenerate = list(mags / total), False
        report.append(LayerShares(i, srcs, list(raw), [float(s) for s in shares], degenerate))
    return report


def write_alpha_trajectory(trajectory: Sequence[tuple[int, Sequence[Sequence[float]]]], path) -> None:
    """CSV with columns ``epoch, layer, source, raw_alpha, normalized_share``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "layer", "source", "raw_alpha", "normalized_share"])
        for epoch, snapshot in trajectory:
            for rep in alpha_report(snapshot):
                for src, raw, share in zip(rep.sources, rep.raw, rep.shares):
                    w.writerow([epoch, rep.layer, src, repr(raw), repr(share)])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def weighted_bce(logits: Tensor, y: Tensor | np.ndarray, pos_weight: float = 2.0) -> Tensor:
    """Mean of ``-y log(w * s) - (1 - y) log(1 - s)`` with ``s = sigmoid(logit)``.

    ``s`` is clamped to ``[1e-12, 1 - 1e-12]`` before the logs. With
    ``w > 1`` a confident correct positive scores ``-log(w)``, so the loss
    can be negative.
    """
    if not pos_weight > 0:
        raise ContractError(f"pos_weight must be positive, got {pos_weight}")
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} and logits {logits.shape} differ")
    s = ag.clip(ag.sigmoid(logits), SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
    pos = ag.mul(y, ag.log(ag.scale(s, pos_weight)))
    neg = ag.mul(Tensor(1.0 - y.values), ag.log(ag.shift(ag.scale(s, -1.0), 1.0)))
    # written as (-neg) - pos so an exact zero comes out as +0.0
    return ag.mean(ag.sub(ag.scale(neg, -1.0), pos))


def head_loss(logits: Tensor, y: np.ndarray, loss_kind: str, pos_weight: float = 2.0) -> Tensor:
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} and predictions {logits.shape} differ")
    if loss_kind == "softmax_ce":
        return ag.softmax_cross_entropy(logits, Tensor(y))
    if loss_kind == "weighted_bce":
        return weighted_bce(logits, y, pos_weight)
    raise ConfigError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


@dataclass
class LossBreakdown:
    central: float
    per_modality: list[float] = field(default_factory=list)
    total: float = 0.0


def global_loss(central: Tensor, unimodal: Sequence[Tensor], y: np.ndarray, loss_kind: str,
                pos_weight: float = 2.0) -> tuple[Tensor, LossBreakdown]:
    """``loss_C + sum_k loss_k`` over the central head and every unimodal head.

    The unimodal terms are summed first, left to right, then added to the
    central term, so ``total == central + sum(per_modality)`` holds exactly
    in floating point.
    """
    lc = head_loss(central, y, loss_kind, pos_weight)
    per = [head_loss(h, y, loss_kind, pos_weight) for h in unimodal]
    total = lc
    if per:
        acc = per[0]
        for term in per[1:]:
            acc = ag.add(acc, term)
        total = ag.add(lc, acc)
    return total, LossBreakdown(lc.item(), [p.item() for p in per], total.item())


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Everything needed to build any of the fusion models."""

    widths: list[int]
    hidden: list[int]
    n_classes: int
    loss_kind: str = "softmax_ce"
    batch_norm: bool = True
    dropout: float = 0.0
    alignment: str = "zero_pad"
    target_width: int | None = None
    pos_weight: float = 2.0
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    @property
    def aligned_width(self) -> int:
        return max(self.widths) if self.target_width is None else self.target_width


@dataclass
class Heads:
    """Model outputs: the prediction plus any auxiliary unimodal heads."""

    final: Tensor
    unimodal: list[Tensor] = field(default_factory=list)


class FusionModel(Module):
    spec: ModelSpec
    multi_objective = False

    def forward(self, features: Sequence[np.ndarray]) -> Heads:
        raise NotImplementedError

    def __call__(self, features: Sequence[np.ndarray]) -> Heads:
        if len(features) != len(self.spec.widths):
            raise ContractError(f"model expects {len(self.spec.widths)} modalities, got {len(features)}")
        for k, (f, w) in enumerate(zip(features, self.spec.widths)):
            if f.shape[1] != w:
                raise ShapeError(f"modality {k + 1}: expected width {w}, got {f.shape[1]}")
        return self.forward(features)

    def loss(self, batch: MultimodalBatch) -> tuple[Tensor, LossBreakdown]:
        heads = self(batch.features)
        unimodal = heads.unimodal if self.multi_objective else []
        return global_loss(heads.final, unimodal, batch.labels, self.spec.loss_kind, self.spec.pos_weight)

    def mlp(self, in_width: int, hidden: Sequence[int], out_width: int | None, rng, dropout_rng) -> MLP:
        s = self.spec
        return MLP(in_width, hidden, out_width, rng, dropout_rng, s.batch_norm, s.dropout,
                   s.bn_momentum, s.bn_epsilon)

    def predict(self, features: Sequence[np.ndarray]) -> np.ndarray:
        """Eval-mode scores: logits for softmax, probabilities for sigmoid heads."""
        was_training = self.training
        self.eval()
        logits = self(features).final.values
        self.train(was_training)
        if self.spec.loss_kind == "weighted_bce":
            return ag._sigmoid(logits)
        return logits


class UnimodalNet(FusionModel):
    """A plain MLP on one modality; the others are ignored."""

    def __init__(self, spec: ModelSpec, modality: int, rng, dropout_rng=None):
        self.spec = spec
        self.modality = modality
        self.net = self.mlp(spec.widths[modality], spec.hidden, spec.n_classes, rng, dropout_rng)

    def children(self):
        yield "net", self.net

    def forward(self, features):
        return Heads(self.net(Tensor(features[self.modality])))


def early_fusion_forward(mlp: MLP, features: Sequence[np.ndarray]) -> Tensor:
    return mlp(Tensor(np.concatenate(list(features), axis=1)))


class EarlyFusionNet(FusionModel):
    """Concatenate raw features, then one MLP."""

    def __init__(self, spec: ModelSpec, rng, dropout_rng=None):
        self.spec = spec
        self.net = self.mlp(sum(spec.widths), spec.hidden, spec.n_classes, rng, dropout_rng)

    def children(self):
        yield "net", self.net

    def forward(self, features):
        return Heads(early_fusion_forward(self.net, features))


def late_fusion_forward(unimodal_mlps: Sequence[MLP], fusion_head: DenseLayer, features: Sequence[np.ndarray]) -> Tensor:
    logits = [net(Tensor(x)) for net, x in zip(unimodal_mlps, features)]
    widths = {lg.shape[1] for lg in logits}
    if len(widths) != 1:
        raise ContractError(f"unimodal heads emit different class counts: {sorted(widths)}")
    return fusion_head(ag.concat(logits))


class LateFusionNet(FusionModel):
    """Unimodal MLPs whose concatenated logits feed one dense layer.

    Also the ModDrop model: the trainer drops whole modalities from the
    batch before it reaches this network.
    """

    def __init__(self, spec: ModelSpec, rng, dropout_rng=None):
        self.spec = spec
        self.nets = [self.mlp(w, spec.hidden, spec.n_classes, rng, dropout_rng) for w in spec.widths]
        self.fusion_head = DenseLayer(len(spec.widths) * spec.n_classes, spec.n_classes, rng)

    def children(self):
        for k, net in enumerate(self.nets):
            yield f"modality_{k + 1}", net
        yield "fusion_head", self.fusion_head

    def forward(self, features):
        return Heads(late_fusion_forward(self.nets, self.fusion_head, features))


@dataclass
class GateParams:
    W1: Tensor
    W2: Tensor
    Wz: Tensor


def gmu_forward(features: Sequence[Tensor], gate: GateParams) -> Tensor:
    """``z * tanh(x1 W1) + (1 - z) * tanh(x2 W2)`` with ``z = sigmoid([x1, x2] Wz)``."""
    if len(features) != 2:
        raise UnsupportedConfigurationError(f"the gated unit fuses exactly 2 modalities, got {len(features)}")
    x1, x2 = features
    h1 = ag.tanh(ag.matmul(x1, gate.W1))
    h2 = ag.tanh(ag.matmul(x2, gate.W2))
    z = ag.sigmoid(ag.matmul(ag.concat([x1, x2]), gate.Wz))
    return ag.add(ag.mul(z, h1), ag.mul(ag.shift(ag.scale(z, -1.0), 1.0), h2))


class GMUNet(FusionModel):
    """Gated multimodal unit of width ``hidden[0]`` followed by the remaining blocks."""

    def __init__(self, spec: ModelSpec, rng, dropout_rng=None):
        if len(spec.widths) != 2:
            raise UnsupportedConfigurationError(f"gmu supports exactly 2 modalities, got {len(spec.widths)}")
        if not spec.hidden:
            raise ConfigError("gmu needs at least one hidden width (the gated unit's size)")
        self.spec = spec
        d = spec.hidden[0]
        w1, w2 = spec.widths
        self.gate = GateParams(init_params((w1, d), rng), init_params((w2, d), rng), init_params((w1 + w2, d), rng))
        self.net = self.mlp(d, spec.hidden[1:], spec.n_classes, rng, dropout_rng)

    def own_parameters(self):
        yield "gmu.W1", self.gate.W1
        yield "gmu.W2", self.gate.W2
        yield "gmu.Wz", self.gate.Wz

    def children(self):
        yield "net", self.net

    def forward(self, features):
        return Heads(self.net(gmu_forward([Tensor(f) for f in features], self.gate)))


class CentralNet(FusionModel):
    """Unimodal MLPs tied together by a central MLP through learned weighted sums.

    ``alphas.layers[0]`` weighs the aligned inputs, ``layers[1..m]`` the
    hidden outputs and ``layers[m+1]`` the logits. Inputs are aligned to one
    width either by zero padding or by a per-modality linear projection
    (``spec.alignment``).
    """

    multi_objective = True

    def __init__(self, spec: ModelSpec, rng, dropout_rng=None):
        self.spec = spec
        width = spec.aligned_width
        if width < max(spec.widths):
            raise ContractError(f"target width {width} is smaller than modality widths {spec.widths}")
        if spec.alignment not in ("zero_pad", "linear_proj"):
            raise ConfigError(f"unknown alignment mode {spec.alignment!r}")
        self.nets = [self.mlp(w, spec.hidden, spec.n_classes, rng, dropout_rng) for w in spec.widths]
        self.central = self.mlp(width, spec.hidden, spec.n_classes, rng, dropout_rng)
        self.projections = (
            [DenseLayer(w, width, rng, bias=False) for w in spec.widths] if spec.alignment == "linear_proj" else []
        )
        self.alphas = AlphaState(len(spec.widths), len(spec.hidden) + 2)

    def children(self):
        for k, net in enumerate(self.nets):
            yield f"modality_{k + 1}", net
        yield "central", self.central
        for k, proj in enumerate(self.projections):
            yield f"proj_{k + 1}", proj
        yield "alpha", self.alphas

    def align(self, k: int, x: np.ndarray) -> Tensor:
        if self.projections:
            return self.projections[k](Tensor(x))
        return Tensor(pad_columns(x, self.spec.aligned_width))

    def forward(self, features):
        outs = [net.forward_hidden(Tensor(x)) for net, x in zip(self.nets, features)]
        layers = self.alphas.layers
        operating = [*self.central.blocks, self.central.head]

        fused = central_fuse(None, [self.align(k, x) for k, x in enumerate(features)], layers[0])
        c = operating[0](fused)
        for i in range(1, len(operating)):
            fused = central_fuse(c, [hidden[i - 1] for _, hidden in outs], layers[i])
            c = operating[i](fused)
        final = central_fuse(c, [logits for logits, _ in outs], layers[-1])
        return Heads(final, [logits for logits, _ in outs])


METHODS = ("early", "late", "moddrop", "gmu", "centralnet")


def build_model(method: str, spec: ModelSpec, rng: np.random.Generator,
                dropout_rng: np.random.Generator | None = None) -> FusionModel:
    """Instantiate the network for a method name (``unimodal_k`` is 1-based)."""
    if method.startswith("unimodal_"):
        try:
            k = int(method.split("_", 1)[1]) - 1
        except ValueError:
            raise ConfigError(f"bad unimodal method name {method!r}") from None
        if not 0 <= k < len(spec.widths):
            raise ConfigError(f"{method}: there are only {len(spec.widths)} modalities")
        return UnimodalNet(spec, k, rng, dropout_rng)
    if method == "early":
        return EarlyFusionNet(spec, rng, dropout_rng)
    if method in ("late", "moddrop"):
        return LateFusionNet(spec, rng, dropout_rng)
    if method == "gmu":
        return GMUNet(spec, rng, dropout_rng)
    if method == "centralnet":
        return CentralNet(spec, rng, dropout_rng)
    raise ConfigError(f"unknown method {method!r}")


def moddrop_apply(batch: MultimodalBatch, drop_prob: float, rng: np.random.Generator) -> MultimodalBatch:
    """Zero each (sample, modality) feature vector independently with ``drop_prob``.

    Training only; ``drop_prob == 0`` returns the batch untouched without
    drawing from ``rng``.
    """
    if not 0.0 <= drop_prob <= 1.0:
        raise ContractError(f"drop probability must lie in [0, 1], got {drop_prob}")
    if drop_prob == 0.0:
        return batch
    keep = rng.random((batch.size, len(batch.features))) >= drop_prob
    feats = [f * keep[:, k:k + 1] for k, f in enumerate(batch.features)]
    return MultimodalBatch(feats, batch.labels)
