import numpy as np
import pytest

from compvid.codec import SpaceToDepthCodec, decode, encode, from_model_space, latent_channels, to_model_space


def test_shape_arithmetic():
    assert encode(np.zeros((8, 64, 64, 3)), 4).shape == (8, 16, 16, 48)
    assert latent_channels(8) == 192


def test_constant_clip():
    np.testing.assert_array_equal(encode(np.full((2, 8, 8, 3), 0.5), 4), 0.5)
    np.testing.assert_array_equal(decode(np.zeros((2, 4, 4, 12)), 2), 0.0)


@pytest.mark.parametrize("factor", [1, 2, 4, 8])
def test_round_trip_bit_exact(factor, rng):
    x = rng.random((3, 16, 24, 3))
    assert decode(encode(x, factor), factor).tobytes() == x.tobytes()
    z = rng.random((3, 16 // factor, 24 // factor, latent_channels(factor)))
    assert encode(decode(z, factor), factor).tobytes() == z.tobytes()


def test_channel_layout():
    # channel index = (row offset * f + col offset) * 3 + rgb
    x = np.zeros((1, 4, 4, 3))
    x[0, 1, 0, 2] = 1.0
    z = encode(x, 2)
    assert z[0, 0, 0, (1 * 2 + 0) * 3 + 2] == 1.0
    assert z.sum() == 1.0


def test_rejections():
    with pytest.raises(ValueError, match="height"):
        encode(np.zeros((1, 10, 8, 3)), 4)
    with pytest.raises(ValueError, match="channels"):
        decode(np.zeros((1, 2, 2, 40)), 4)


def test_model_space_round_trip(rng):
    z = rng.random((2, 3, 3, 12))
    np.testing.assert_allclose(from_model_space(to_model_space(z)), z, rtol=0, atol=1e-15)
    assert to_model_space(np.zeros(1))[0] == -1 and to_model_space(np.ones(1))[0] == 1


def test_estimator_api(rng):
    x = rng.random((2, 8, 8, 3))
    codec = SpaceToDepthCodec(factor=2).fit(x)
    assert codec.n_channels_ == 12
    assert codec.get_params() == {"factor": 2}
    np.testing.assert_array_equal(codec.inverse_transform(codec.fit_transform(x)), x)
    with pytest.raises(ValueError):
        SpaceToDepthCodec(factor=3).fit(x)
