import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.stats import qmc


class GridSpec(BaseModel):
    """Tensor grid on the box prod_l [lo[l], hi[l]] with nodes[l] points per axis."""

    model_config = ConfigDict(frozen=True)

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    nodes: tuple[int, ...]

    @model_validator(mode="after")
    def _check(self):
        if not (len(self.lo) == len(self.hi) == len(self.nodes) >= 1):
            raise ValueError("lo, hi and nodes must have the same positive length")
        for lo, hi, n in zip(self.lo, self.hi, self.nodes):
            if not hi > lo:
                raise ValueError(f"empty axis [{lo}, {hi}]")
            if n < 3:
                raise ValueError("each axis needs at least 3 nodes")
        return self

    @classmethod
    def cube(cls, lo: float, hi: float, nodes: int, dim: int) -> "GridSpec":
        return cls(lo=(lo,) * dim, hi=(hi,) * dim, nodes=(nodes,) * dim)

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.nodes)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lo, self.hi, self.nodes)]

    def spacing(self) -> np.ndarray:
        return np.array(
            [(hi - lo) / (n - 1) for lo, hi, n in zip(self.lo, self.hi, self.nodes)]
        )

    def mesh(self) -> np.ndarray:
        """Coordinates with shape (*shape, dim)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def points(self) -> np.ndarray:
        """All nodes flattened in C order, shape (prod(shape), dim)."""
        return self.mesh().reshape(-1, self.dim)

    def interior_mask(self, margin: int = 1) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[tuple(slice(margin, n - margin) for n in self.nodes)] = True
        return mask


def low_discrepancy_points(
    lo: tuple[float, ...] | list[float],
    hi: tuple[float, ...] | list[float],
    count: int,
    seed: int,
) -> np.ndarray:
    """Scrambled Sobol points in the box, reproducible from the seed."""
    sampler = qmc.Sobol(d=len(lo), scramble=True, seed=seed)
    unit = sampler.random(count)
    return qmc.scale(unit, lo, hi)
