"""Keep-set selection and structural rewrites of pruned checkpoints."""

import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, layer_init
from .common import InputError, InvariantError, PolicyError
from .graph import PASSTHROUGH, LayerKind, ModelGraph
from .stats import FilterNormSet, GaussianFit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneDecision:
    layer_index: int
    alpha: float
    keep: tuple[int, ...]
    removed_low: tuple[int, ...]
    removed_high: tuple[int, ...]
    mu: float
    sigma: float
    # keep-all fallback for sigma == 0 or an empty interval
    degenerate: bool = False

    @property
    def n_filters(self) -> int:
        return len(self.keep) + len(self.removed_low) + len(self.removed_high)

    @property
    def keeps_all(self) -> bool:
        return not self.removed_low and not self.removed_high

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "alpha": self.alpha,
            "keep": list(self.keep),
            "removed_low": list(self.removed_low),
            "removed_high": list(self.removed_high),
            "mu": self.mu,
            "sigma": self.sigma,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneDecision":
        return cls(
            layer_index=d["layer_index"],
            alpha=d["alpha"],
            keep=tuple(d["keep"]),
            removed_low=tuple(d["removed_low"]),
            removed_high=tuple(d["removed_high"]),
            mu=d["mu"],
            sigma=d["sigma"],
            degenerate=d["degenerate"],
        )


def select_keep_set(norms: FilterNormSet, fit: GaussianFit, alpha: float) -> PruneDecision:
    """Keeps filters whose norm lies in the open interval (mu - a*sigma, mu + a*sigma)."""
    if not alpha > 0:
        raise InputError(f"alpha must be positive: {alpha}")
    x = np.asarray(norms.norms, dtype=np.float64)
    if x.size == 0:
        raise InputError(f"layer {norms.layer_index}: empty norm set")
    lo = fit.mu - alpha * fit.sigma
    hi = fit.mu + alpha * fit.sigma
    inside = (x > lo) & (x < hi)
    if fit.sigma == 0 or not inside.any():
        return PruneDecision(
            norms.layer_index,
            alpha,
            tuple(range(x.size)),
            (),
            (),
            fit.mu,
            fit.sigma,
            degenerate=True,
        )
    idx = np.arange(x.size)
    return PruneDecision(
        norms.layer_index,
        alpha,
        tuple(idx[inside].tolist()),
        tuple(idx[x <= lo].tolist()),
        tuple(idx[x >= hi].tolist()),
        fit.mu,
        fit.sigma,
    )


def _check_prunable(graph: ModelGraph, layer_index: int):
    if not 0 <= layer_index < len(graph.layers):
        raise InputError(f"layer index out of range: {layer_index}")
    layer = graph.layers[layer_index]
    if layer.kind != LayerKind.CONV or not layer.prunable:
        raise PolicyError(
            f"layer {layer_index} ({layer.name}) is not prunable "
            "(shortcut, residual output and stem convs are protected)"
        )


def prune_conv_pair(ckpt: Checkpoint, layer_index: int, decision: PruneDecision) -> Checkpoint:
    """Removes filters of conv ``layer_index`` outside ``decision.keep`` and the
    matching input channels of the layer consuming them."""
    graph = ckpt.graph
    _check_prunable(graph, layer_index)
    if decision.layer_index != layer_index:
        raise InputError(
            f"decision is for layer {decision.layer_index}, not {layer_index}"
        )
    layer = graph.layers[layer_index]
    if decision.n_filters != layer.out_channels:
        raise InputError(
            f"decision covers {decision.n_filters} filters, {layer.name} has "
            f"{layer.out_channels}"
        )
    if not decision.keep:
        raise InvariantError(f"{layer.name}: keep set is empty")
    if decision.keeps_all:
        return ckpt

    keep = np.asarray(decision.keep, dtype=np.int64)
    k = len(keep)
    t = ckpt.tensors
    updates = {f"{layer.name}.weight": t[f"{layer.name}.weight"][keep]}
    if layer.bias:
        updates[f"{layer.name}.bias"] = t[f"{layer.name}.bias"][keep]
    graph = graph.with_layer(layer_index, out_channels=k)

    i = layer_index + 1
    while i < len(graph.layers) and graph.layers[i].kind in PASSTHROUGH:
        follower = graph.layers[i]
        for name in follower.tensor_shapes():
            updates[name] = t[name][keep]
        graph = graph.with_layer(i, in_channels=k, out_channels=k)
        i += 1
    if i == len(graph.layers) or graph.layers[i].kind not in (
        LayerKind.CONV,
        LayerKind.LINEAR,
    ):
        raise InvariantError(f"{layer.name}: no consuming conv/linear layer found")
    consumer = graph.layers[i]
    # after global pooling the classifier columns map 1:1 to channels
    updates[f"{consumer.name}.weight"] = t[f"{consumer.name}.weight"][:, keep]
    graph = graph.with_layer(i, in_channels=k)

    pruned = ckpt.with_tensors(updates, graph=graph)
    pruned.validate()
    logger.debug(
        "pruned %s: %d -> %d filters (consumer %s)",
        layer.name,
        layer.out_channels,
        k,
        consumer.name,
    )
    return pruned


def reinit_pruned_layer(ckpt: Checkpoint, layer_index: int, seed: int) -> Checkpoint:
    """Re-draws conv ``layer_index`` and resets the batchnorm right after it.
    All other tensors are left untouched."""
    graph = ckpt.graph
    layer = graph.layers[layer_index]
    if layer.kind != LayerKind.CONV:
        raise InputError(f"layer {layer_index} ({layer.name}) is not a conv layer")
    rng = np.random.default_rng((seed, layer_index))
    updates = layer_init(layer, rng)
    nxt = layer_index + 1
    if nxt < len(graph.layers) and graph.layers[nxt].kind == LayerKind.BATCHNORM:
        updates.update(layer_init(graph.layers[nxt], rng))
    return ckpt.with_tensors(updates)


def count_filters(graph: ModelGraph) -> int:
    return sum(graph.layers[i].out_channels for i in graph.conv_indices())


def count_params(ckpt: Checkpoint) -> int:
    """Element count of every stored tensor, batchnorm running stats included."""
    return sum(t.size for t in ckpt.tensors.values())


def count_flops(graph: ModelGraph) -> int:
    """2 * MACs of conv and linear layers at batch size 1."""
    shapes = graph.feature_shapes()
    total = 0
    for layer, out in zip(graph.layers, shapes):
        if layer.kind == LayerKind.CONV:
            c, h, w = out
            total += 2 * c * layer.in_channels * layer.kernel**2 * h * w
        elif layer.kind == LayerKind.LINEAR:
            total += 2 * layer.in_channels * layer.out_channels
    return total
