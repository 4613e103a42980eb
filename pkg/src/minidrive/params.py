"""Named parameter store shared by the backbone, experts and denoiser."""

from __future__ import annotations

import numpy as np

from .autodiff import DEFAULT_DTYPE, DiffTensor, parameter


class ParamStore:
    """Ordered mapping name -> trainable DiffTensor."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, DiffTensor] = {}

    def add(self, name: str, values: np.ndarray) -> DiffTensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = parameter(np.asarray(values), dtype=self.dtype)
        self._params[name] = t
        return t

    def normal(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
               std: float = 0.02) -> DiffTensor:
        return self.add(name, rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> DiffTensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> DiffTensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> DiffTensor:
        return self._params[name]

    def swap(self, name: str, tensor: DiffTensor) -> DiffTensor:
        """Replace one parameter tensor, returning the old one (grad checks)."""
        old = self._params[name]
        self._params[name] = tensor
        return old

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.values.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.values for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Overwrite parameter values in place from `arrays`."""
        for k, v in arrays.items():
            if k not in self._params:
                if strict:
                    raise KeyError(f"checkpoint tensor {k!r} has no matching parameter")
                continue
            t = self._params[k]
            if tuple(v.shape) != t.shape:
                raise ValueError(f"shape mismatch for {k!r}: {v.shape} vs {t.shape}")
            t.values = v.astype(self.dtype)
            t.grad = None
