import numpy as np
import pytest

from fedlrmc import storage
from fedlrmc.errors import FormatError
from fedlrmc.problem import gen_ground_truth, observe, sample_mask


@pytest.fixture(scope="module")
def objs():
    gt = gen_ground_truth(12, 9, 2, seed=4)
    y = observe(gt, sample_mask(12, 9, 0.5, seed=5), 0.01, "rademacher", seed=6)
    return gt, y


def _same_gt(a, b):
    return (np.array_equal(a.u_star, b.u_star) and np.array_equal(a.v_star, b.v_star)
            and np.array_equal(a.sigma_star, b.sigma_star))


def _same_obs(a, b):
    return (np.array_equal(a.mask.indptr, b.mask.indptr) and np.array_equal(a.mask.indices, b.mask.indices)
            and np.array_equal(a.values, b.values) and a.p == b.p and a.noise_level == b.noise_level)


def test_binary_roundtrip(objs, tmp_path):
    gt, y = objs
    assert _same_gt(storage.loads(storage.dumps(gt)), gt)
    assert _same_obs(storage.loads(storage.dumps(y)), y)
    storage.save(tmp_path / "y.flrm", y)
    assert _same_obs(storage.load(tmp_path / "y.flrm"), y)


def test_text_roundtrip(objs):
    gt, y = objs
    assert _same_gt(storage.from_text(storage.to_text(gt)), gt)
    assert _same_obs(storage.from_text(storage.to_text(y)), y)


def test_header_layout(objs):
    buf = storage.dumps(objs[0])
    assert buf[:4] == b"FLRM"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert buf[6] == 1


def test_malformed_inputs(objs):
    buf = storage.dumps(objs[1])
    with pytest.raises(FormatError):
        storage.loads(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        storage.loads(buf[:4] + (9).to_bytes(2, "little") + buf[6:])
    with pytest.raises(FormatError):
        storage.loads(buf[:-3])
    with pytest.raises(FormatError):
        storage.loads(buf + b"\0")
    with pytest.raises(FormatError):
        storage.from_text("hello\n")
    with pytest.raises(TypeError):
        storage.dumps(3)
