"""Encoder and generator backends.

Real encoders (CLIP-style text/image towers) and diffusion generators run
on GPUs and are out of scope here; the protocols below define the seam,
and the Mock* implementations provide deterministic stand-ins: every
embedding is a hash-seeded unit vector, a pure function of (backend name,
backend version, payload bytes). That is enough to exercise the full
export pipeline, the file contract, and determinism guarantees.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import BackendUnavailableError


@runtime_checkable
class TextEncoder(Protocol):
    name: str
    version: str
    dim: int

    def encode_text(self, text: str) -> np.ndarray: ...


@runtime_checkable
class ImageEncoder(Protocol):
    name: str
    version: str
    dim: int

    def encode_image_bytes(self, data: bytes) -> np.ndarray: ...


@runtime_checkable
class ImageGenerator(Protocol):
    name: str
    version: str

    def available(self) -> bool: ...
    def generate(self, prompt: str, seed: int) -> bytes: ...


def _hash_unit_vector(dim: int, *parts: bytes) -> np.ndarray:
    digest = hashlib.sha256(b"\x1f".join(parts)).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


@dataclass(frozen=True)
class MockTextEncoder:
    dim: int = 16
    name: str = "mock-text-encoder"
    version: str = "1.0"

    def encode_text(self, text: str) -> np.ndarray:
        return _hash_unit_vector(
            self.dim, b"text", self.name.encode(), self.version.encode(),
            text.encode("utf-8"),
        )


@dataclass(frozen=True)
class MockImageEncoder:
    dim: int = 16
    name: str = "mock-image-encoder"
    version: str = "1.0"

    def encode_image_bytes(self, data: bytes) -> np.ndarray:
        # pure function of the pixel bytes: duplicated images encode identically
        return _hash_unit_vector(
            self.dim, b"image", self.name.encode(), self.version.encode(), data,
        )


@dataclass(frozen=True)
class MockGenerator:
    """Deterministic stand-in for a text-to-image diffusion model.

    Emits tiny binary PPM images whose pixels are a hash of
    (name, version, prompt, seed).
    """

    name: str = "mock-gdm"
    version: str = "1.0"
    side: int = 4
    is_available: bool = True

    def available(self) -> bool:
        return self.is_available

    def generate(self, prompt: str, seed: int) -> bytes:
        if not self.is_available:
            raise BackendUnavailableError(f"generator {self.name} is unavailable")
        digest = hashlib.sha256(
            b"\x1f".join([b"gen", self.name.encode(), self.version.encode(),
                          prompt.encode("utf-8"), str(seed).encode()])
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        pixels = rng.integers(0, 256, size=self.side * self.side * 3, dtype=np.uint8)
        header = f"P6\n{self.side} {self.side}\n255\n".encode("ascii")
        return header + pixels.tobytes()
