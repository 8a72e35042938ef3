import math

import numpy as np
import pytest

from multishot.attention import numeric_grad, relative_error
from multishot.camera import CameraExtrinsics, CameraIntrinsics, CameraPose, plucker_map
from multishot.conditioning import (
    ConvBranch,
    MlpBranch,
    encode_extrinsic,
    encode_plucker,
    inject,
    load_conv_branch,
    load_mlp_branch,
    save_branch,
)
from multishot.errors import DomainError

from conftest import random_pose, random_rotation


def gelu_oracle(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def test_fresh_mlp_outputs_zero(rng):
    branch = MlpBranch.init(16, seed=3)
    assert branch.hidden == 64
    assert not branch.w2.any() and not branch.b2.any()
    for _ in range(10):
        e = CameraExtrinsics(random_rotation(rng), rng.standard_normal(3))
        out = encode_extrinsic(branch, e)
        assert out.shape == (16,)
        assert not out.any()


def test_mlp_hand_evaluation():
    b, w = 0.7, -1.3
    branch = MlpBranch(
        w1=np.zeros((1, 12)), b1=np.array([b]), w2=np.full((5, 1), w), b2=np.zeros(5)
    )
    out = encode_extrinsic(branch, CameraExtrinsics(np.eye(3), [1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, w * gelu_oracle(b), rtol=1e-15)


def test_mlp_flatten_is_row_major():
    e = CameraExtrinsics(np.eye(3), [4.0, 5.0, 6.0])
    np.testing.assert_array_equal(e.flatten(), [1, 0, 0, 4, 0, 1, 0, 5, 0, 0, 1, 6])


def test_transfer_layer_is_linear(rng):
    branch = MlpBranch.init(8, seed=1)
    branch.w2[...] = rng.standard_normal(branch.w2.shape)
    e = CameraExtrinsics(random_rotation(rng), rng.standard_normal(3))
    once = encode_extrinsic(branch, e)
    branch.w2 *= 2
    np.testing.assert_allclose(encode_extrinsic(branch, e), 2 * once, rtol=1e-14)


def test_mlp_requires_width_12():
    with pytest.raises(DomainError):
        MlpBranch(np.zeros((4, 11)), np.zeros(4), np.zeros((2, 4)), np.zeros(2))


def test_conv_zero_weights():
    branch = ConvBranch.zeros(8, 2)
    pose = CameraPose(CameraIntrinsics(10, 10, 2, 2, 4, 4), CameraExtrinsics(np.eye(3), [1, 2, 3]))
    out = encode_plucker(branch, plucker_map(pose, 4, 4))
    assert out.shape == (2, 2, 8)
    assert not out.any()


def test_conv_1x1_channel_projection(unit_intrinsics):
    w = np.zeros((1, 6, 1, 1))
    w[0, 5, 0, 0] = 1.0
    branch = ConvBranch([w], [np.zeros(1)])
    pm = plucker_map(CameraPose(unit_intrinsics, CameraExtrinsics.identity()), 4, 4)
    out = encode_plucker(branch, pm)
    np.testing.assert_array_equal(out[..., 0], pm.direction[..., 2])


def test_conv_window_sum_oracle(rng):
    branch = ConvBranch([np.ones((3, 6, 2, 2))], [np.zeros(3)])
    pm = plucker_map(random_pose(rng), 2, 2)
    out = encode_plucker(branch, pm)
    total = 0.0
    for i in range(2):
        for j in range(2):
            for c in range(6):
                total += pm.data[i, j, c]
    assert out.shape == (1, 1, 3)
    np.testing.assert_allclose(out[0, 0], total, rtol=1e-12, atol=1e-12)


def test_conv_strided_brute_force(rng):
    k, d = 2, 3
    branch = ConvBranch.init(d, k, seed=5)
    x = rng.standard_normal((4, 6, 6))
    out = branch.forward(x)[0]
    w, b = branch.weights[0], branch.biases[0]
    for i in range(2):
        for j in range(3):
            for o in range(d):
                acc = b[o]
                for c in range(6):
                    for a in range(k):
                        for bb in range(k):
                            acc += w[o, c, a, bb] * x[i * k + a, j * k + bb, c]
                assert out[i, j, o] == pytest.approx(acc, abs=1e-12)


def test_conv_indivisible_names_dims(rng):
    branch = ConvBranch.init(4, 3, seed=0)
    with pytest.raises(DomainError, match=r"4x6.*k=3"):
        branch.forward(rng.standard_normal((4, 6, 6)))


def test_inject_examples(rng):
    z = rng.standard_normal((6, 4))
    out = inject(z, np.zeros(4), np.zeros((6, 4)))
    assert out.tobytes() == z.tobytes()
    c_ext, c_plk = rng.standard_normal(4), rng.standard_normal((6, 4))
    np.testing.assert_array_equal(inject(np.zeros((6, 4)), c_ext, c_plk), c_ext[None, :] + c_plk)


def test_inject_round_trip_single_precision(rng):
    z = rng.standard_normal((32, 8)).astype(np.float32)
    a = rng.standard_normal(8).astype(np.float32)
    b = rng.standard_normal((32, 8)).astype(np.float32)
    back = inject(inject(z, a, b), -a, -b)
    assert back.shape == z.shape
    np.testing.assert_allclose(back, z, atol=1e-6)


def test_inject_shape_errors(rng):
    z = np.zeros((3, 4))
    with pytest.raises(DomainError):
        inject(z, np.zeros(5), np.zeros((3, 4)))
    with pytest.raises(DomainError):
        inject(z, np.zeros(4), np.zeros((2, 4)))


def test_zero_init_inject_equals_z_plus_plucker(rng):
    mlp = MlpBranch.init(8, seed=2)
    conv = ConvBranch.init(8, 1, seed=2)
    pose = random_pose(rng)
    c_ext = encode_extrinsic(mlp, pose.extrinsics)
    c_plk = encode_plucker(conv, plucker_map(pose, 2, 3)).reshape(6, 8)
    z = rng.standard_normal((6, 8))
    assert inject(z, c_ext, c_plk).tobytes() == (z + c_plk).tobytes()


def test_zero_upstream_gives_zero_grads(rng):
    mlp = MlpBranch.init(4, seed=0)
    _, cache = mlp.forward(rng.standard_normal((3, 12)))
    assert all(not g.any() for g in mlp.backward(cache, np.zeros((3, 4))).values())
    conv = ConvBranch.init(4, 2, seed=0, depth=2)
    _, cache = conv.forward(rng.standard_normal((2, 4, 4, 6)))
    assert all(not g.any() for g in conv.backward(cache, np.zeros((2, 2, 2, 4))).values())


def test_one_parameter_closed_form():
    # out = w * gelu(b), loss = (out - y)^2, dloss/dw = 2 (w g - y) g
    b, w, y = 0.4, 1.5, 0.2
    mlp = MlpBranch(np.zeros((1, 12)), np.array([b]), np.array([[w]]), np.zeros(1))
    out, cache = mlp.forward(np.zeros(12))
    g = gelu_oracle(b)
    grads = mlp.backward(cache, 2 * (out - y))
    assert grads["w2"][0, 0] == pytest.approx(2 * (w * g - y) * g, rel=1e-14)


def _fd_check(branch, x, seed):
    rng = np.random.default_rng(seed)
    out, _ = branch.forward(x)
    target = rng.standard_normal(out.shape)

    def loss():
        o = branch.forward(x)[0]
        return float(np.sum((o - target) ** 2) / 2)

    _, cache = branch.forward(x)
    grads = branch.backward(cache, branch.forward(x)[0] - target)
    return {name: relative_error(grads[name], numeric_grad(loss, p)) for name, p in branch.params().items()}


@pytest.mark.parametrize("seed", range(20))
def test_mlp_gradcheck(seed):
    rng = np.random.default_rng(seed)
    mlp = MlpBranch.init(4, hidden=6, seed=seed)
    mlp.w2[...] = rng.uniform(-1, 1, mlp.w2.shape)
    assert sum(p.size for p in mlp.params().values()) <= 200
    errs = _fd_check(mlp, rng.standard_normal((3, 12)), seed)
    assert max(errs.values()) < 1e-5, errs


@pytest.mark.parametrize("seed", range(20))
def test_conv_gradcheck(seed):
    rng = np.random.default_rng(seed)
    conv = ConvBranch.init(3, 2, seed=seed, depth=1 + seed % 2)
    assert sum(p.size for p in conv.params().values()) <= 200
    errs = _fd_check(conv, rng.standard_normal((2, 4, 2, 6)), seed)
    assert max(errs.values()) < 1e-5, errs


def test_branch_serialization_bit_exact(tmp_path, rng):
    mlp = MlpBranch.init(8, seed=4)
    mlp.w2[...] = rng.standard_normal(mlp.w2.shape)
    save_branch(tmp_path / "mlp.bin", mlp)
    back = load_mlp_branch(tmp_path / "mlp.bin")
    for a, b in zip(mlp.to_tensors(), back.to_tensors()):
        assert a.tobytes() == b.tobytes()
    conv = ConvBranch.init(8, 2, seed=4, depth=3)
    save_branch(tmp_path / "conv.bin", conv)
    back = load_conv_branch(tmp_path / "conv.bin")
    assert len(back.weights) == 3
    for a, b in zip(conv.to_tensors(), back.to_tensors()):
        assert a.tobytes() == b.tobytes()


def test_single_precision_branch(rng):
    mlp = MlpBranch.init(4, seed=0, dtype=np.float32)
    out = encode_extrinsic(mlp, CameraExtrinsics.identity())
    assert out.dtype == np.float32
