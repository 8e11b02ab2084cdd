from abc import ABC, abstractmethod
from typing import Optional

import numpy as np

from . import tensor as T
from .common import DimensionError, UsageError
from .graph import LayerKind, LayerSpec, ModelGraph, ResidualBlock


class Module(ABC):
    """One executable layer. ``forward`` caches what ``backward`` needs."""

    spec: LayerSpec
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self, spec: LayerSpec, tensors: dict[str, np.ndarray], dtype):
        self.spec = spec
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self.cache = None
        for name in spec.tensor_shapes():
            arr = np.array(tensors[name], dtype=dtype, copy=True)
            if name.endswith(("running_mean", "running_var")):
                self.buffers[name] = arr
            else:
                self.params[name] = arr

    def p(self, suffix: str) -> Optional[np.ndarray]:
        return self.params.get(f"{self.spec.name}.{suffix}")

    @abstractmethod
    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        ...

    @abstractmethod
    def backward(self, grad: np.ndarray) -> np.ndarray:
        ...

    def _cached(self):
        if self.cache is None:
            raise UsageError(f"{self.spec.name}: backward before forward")
        return self.cache


class Conv2d(Module):
    def forward(self, x, train):
        out, self.cache = T.conv2d_forward(
            x, self.p("weight"), self.p("bias"), self.spec.stride, self.spec.pad
        )
        return out

    def backward(self, grad):
        gx, gw, gb = T.conv2d_backward(grad, self._cached())
        self.grads[f"{self.spec.name}.weight"] = gw
        if gb is not None:
            self.grads[f"{self.spec.name}.bias"] = gb
        return gx


class BatchNorm2d(Module):
    def forward(self, x, train):
        n = self.spec.name
        out, mean, var, self.cache = T.batchnorm_forward(
            x,
            self.p("gamma"),
            self.p("beta"),
            self.buffers[f"{n}.running_mean"],
            self.buffers[f"{n}.running_var"],
            train,
        )
        self.buffers[f"{n}.running_mean"] = mean
        self.buffers[f"{n}.running_var"] = var
        return out

    def backward(self, grad):
        gx, gg, gb = T.batchnorm_backward(grad, self._cached())
        self.grads[f"{self.spec.name}.gamma"] = gg
        self.grads[f"{self.spec.name}.beta"] = gb
        return gx


class ReLU(Module):
    def forward(self, x, train):
        out, self.cache = T.relu_forward(x)
        return out

    def backward(self, grad):
        return T.relu_backward(grad, self._cached())


class MaxPool2x2(Module):
    def forward(self, x, train):
        out, self.cache = T.maxpool2x2_forward(x)
        return out

    def backward(self, grad):
        return T.maxpool2x2_backward(grad, self._cached())


class GlobalAvgPool(Module):
    def forward(self, x, train):
        out, self.cache = T.global_avg_pool_forward(x)
        return out

    def backward(self, grad):
        return T.global_avg_pool_backward(grad, self._cached())


class Linear(Module):
    def forward(self, x, train):
        out, self.cache = T.linear_forward(x, self.p("weight"), self.p("bias"))
        return out

    def backward(self, grad):
        gx, gw, gb = T.linear_backward(grad, self._cached())
        self.grads[f"{self.spec.name}.weight"] = gw
        if gb is not None:
            self.grads[f"{self.spec.name}.bias"] = gb
        return gx


MODULES = {
    LayerKind.CONV: Conv2d,
    LayerKind.BATCHNORM: BatchNorm2d,
    LayerKind.RELU: ReLU,
    LayerKind.MAXPOOL: MaxPool2x2,
    LayerKind.GAP: GlobalAvgPool,
    LayerKind.LINEAR: Linear,
}


class Network:
    """Executable form of a ``ModelGraph`` plus its tensors.

    The network owns copies of the tensors; use ``state()`` to read them back.
    """

    def __init__(self, graph: ModelGraph, tensors: dict, dtype=np.float32):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.modules = [MODULES[l.kind](l, tensors, self.dtype) for l in graph.layers]
        # post-add activation of every residual block, keyed by block start
        self.block_relus = {
            b.start: ReLU(LayerSpec(f"block{b.start}.relu", LayerKind.RELU, 1, 1), {}, dtype)
            for b in graph.blocks
        }

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if tuple(x.shape[1:]) != tuple(self.graph.input_shape):
            raise DimensionError(
                "batch does not match graph input", x.shape[1:], self.graph.input_shape
            )
        x = x.astype(self.dtype, copy=False)
        T.check_finite("input batch", x)
        for seg in self.graph.segments():
            if isinstance(seg, ResidualBlock):
                y = x
                for i in seg.main:
                    y = self.modules[i].forward(y, train)
                s = x
                for i in seg.shortcut:
                    s = self.modules[i].forward(s, train)
                x = self.block_relus[seg.start].forward(y + s, train)
            else:
                x = self.modules[seg].forward(x, train)
        T.check_finite("logits", x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for seg in reversed(list(self.graph.segments())):
            if isinstance(seg, ResidualBlock):
                g = self.block_relus[seg.start].backward(grad)
                gm = g
                for i in reversed(seg.main):
                    gm = self.modules[i].backward(gm)
                gs = g
                for i in reversed(seg.shortcut):
                    gs = self.modules[i].backward(gs)
                grad = gm + gs
            else:
                grad = self.modules[seg].backward(grad)
        return grad

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.modules:
            out.update(m.params)
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.modules:
            out.update(m.grads)
        return out

    def set_parameters(self, params: dict[str, np.ndarray]):
        for m in self.modules:
            for name in m.params:
                if name in params:
                    m.params[name] = params[name]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.modules:
            out.update(m.params)
            out.update(m.buffers)
        return out
