"""Smoke test for the lapirn Python extension.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import os
import tempfile

import lapirn


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    pair = lapirn.synth_pair(3, [32, 32], 2.0)
    fixed, moving = pair["fixed"], pair["moving"]
    assert fixed.shape == [1, 32, 32]

    levels = lapirn.build_pyramid(fixed, 3)
    assert [l.shape for l in levels] == [[1, 8, 8], [1, 16, 16], [1, 32, 32]]

    zero = lapirn.Field.zeros([2, 32, 32])
    assert lapirn.warp(fixed, zero) == fixed

    det = lapirn.jacobian_det(lapirn.integrate(pair["velocity"]))
    pct, std = lapirn.folding_stats(det)
    assert pct == 0.0 and std >= 0.0

    ncc = lapirn.local_ncc(fixed, fixed, 3)
    # flat regions of the synthetic image have near-zero window variance
    assert 0.95 < ncc <= 1.0 + 1e-6, ncc

    seg = pair["seg_fixed"]
    assert all(v == 1.0 for v in lapirn.dice(seg, seg).values())
    assert lapirn.topology_change(seg, seg) == 1.0

    out = lapirn.register_direct(fixed, moving, iters=100)
    assert out["pct_folding"] == 0.0
    assert out["disp"].shape == [2, 32, 32]

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "f.lpt")
        lapirn.write_tensor(p, fixed)
        back = lapirn.read_tensor(p)
        assert back == fixed
        q = os.path.join(d, "s.lpt")
        lapirn.write_tensor(q, seg)
        assert lapirn.read_tensor(q) == seg

    try:
        lapirn.warp(fixed, lapirn.Field.zeros([3, 32, 32]))
    except ValueError as e:
        assert "warp" in str(e)
    else:
        raise AssertionError("shape mismatch not rejected")

    assert close(lapirn.Field([1, 2], [0.5, -1.0]).tolist(), [0.5, -1.0], 0.0)
    print("smoke test passed")


if __name__ == "__main__":
    main()
