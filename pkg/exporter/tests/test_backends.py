import numpy as np
import pytest

from embexport import (
    BackendUnavailableError,
    MockGenerator,
    MockImageEncoder,
    MockTextEncoder,
)


def test_text_encoder_deterministic_unit():
    enc = MockTextEncoder(dim=12)
    a = enc.encode_text("a photo of a dog")
    b = enc.encode_text("a photo of a dog")
    assert np.array_equal(a, b)
    assert a.dtype == np.float32 and a.shape == (12,)
    assert abs(np.linalg.norm(a.astype(np.float64)) - 1.0) <= 1e-5


def test_text_encoder_distinguishes_inputs():
    enc = MockTextEncoder(dim=12)
    assert not np.array_equal(enc.encode_text("dog"), enc.encode_text("cat"))


def test_text_encoder_version_changes_embedding():
    a = MockTextEncoder(dim=12, version="1.0").encode_text("dog")
    b = MockTextEncoder(dim=12, version="2.0").encode_text("dog")
    assert not np.array_equal(a, b)


def test_image_encoder_pure_function_of_bytes():
    enc = MockImageEncoder(dim=10)
    data = b"P6\n1 1\n255\n\x01\x02\x03"
    assert np.array_equal(enc.encode_image_bytes(data), enc.encode_image_bytes(bytes(data)))
    assert not np.array_equal(enc.encode_image_bytes(data), enc.encode_image_bytes(data + b"\x00"))


def test_generator_deterministic_ppm():
    gen = MockGenerator()
    a = gen.generate("A photo of a dog", seed=7)
    assert a == gen.generate("A photo of a dog", seed=7)
    assert a.startswith(b"P6\n")
    assert a != gen.generate("A photo of a dog", seed=8)
    assert a != gen.generate("A photo of a cat", seed=7)


def test_generator_unavailable():
    gen = MockGenerator(is_available=False)
    assert not gen.available()
    with pytest.raises(BackendUnavailableError):
        gen.generate("x", 0)
