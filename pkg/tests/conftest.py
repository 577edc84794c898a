from __future__ import annotations

import numpy as np
import pytest

from ellslice.linalg import RngStream


class ScriptedRng:
    """RngStream stand-in that replays fixed draws, for pinning a transition's path."""

    def __init__(self, normals=(), uniforms=(), open_left=()):
        self._normals = [np.asarray(z, dtype=float) for z in normals]
        self._uniforms = list(uniforms)
        self._open_left = list(open_left)
        self.uniform_calls = []

    def standard_normal(self, size=None):
        return self._normals.pop(0)

    def uniform(self, low=0.0, high=1.0):
        self.uniform_calls.append((low, high))
        frac = self._uniforms.pop(0)
        return low + frac * (high - low)

    def uniform_open_left(self):
        return self._open_left.pop(0)

    def unit_vector(self, dim):
        z = self.standard_normal(dim)
        return z / np.linalg.norm(z)


@pytest.fixture
def rng():
    return RngStream(20240611, 7)
