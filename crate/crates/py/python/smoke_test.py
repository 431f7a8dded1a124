"""Smoke test for the `hbl` extension module.

    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/hbl-*.whl
    python crates/py/python/smoke_test.py
"""

import json
import math
import os
import tempfile

import hbl


def check_hadamard():
    x = hbl.Tensor([4], [1.0, 1.0, 1.0, 1.0])
    assert hbl.hadamard(x).data == [2.0, 0.0, 0.0, 0.0]
    y = hbl.Tensor([2, 8], [math.sin(0.3 * i) for i in range(16)])
    assert hbl.hadamard(hbl.hadamard(y)).allclose(y, 1e-5)
    try:
        hbl.hadamard(hbl.Tensor([3], [1.0, 2.0, 3.0]))
    except hbl.HblError as e:
        assert "power of two" in str(e)
    else:
        raise AssertionError("non power of two accepted")


def check_quantizers():
    w = hbl.quantize_weight(hbl.Tensor([2, 2], [0.9, -0.2, 0.0, 1.3]))
    assert abs(w.alpha - 0.6) < 1e-6
    assert w.trits().data == [1.0, 0.0, 0.0, 1.0]

    a = hbl.quantize_act(hbl.Tensor([1, 4], [2.0, -1.0, 0.5, -4.0]), 8)
    assert a.codes().data == [64.0, -32.0, 16.0, -127.0]
    assert a.scales == [4.0]

    kv = hbl.quantize_kv(hbl.Tensor([1, 3], [2.0, -2.0, 1.0]), 4)
    assert kv.codes().data == [15.0, 0.0, 12.0]
    assert kv.dequantize().data == [1.75, -2.0, 1.0]
    bos = hbl.quantize_kv(hbl.Tensor([1, 3], [2.0, -2.0, 1.0]), 4, [True])
    assert bos.token_bits == [8]


def check_gemm():
    wt = hbl.Tensor([3, 8], [math.cos(0.7 * i) for i in range(24)])
    xt = hbl.Tensor([2, 8], [math.sin(1.3 * i) for i in range(16)])
    w = hbl.quantize_weight(wt)
    for bits in (8, 4):
        x = hbl.quantize_act(xt, bits)
        fast = hbl.gemm_ternary(w, x)
        ref = hbl.gemm_reference(w.dequantize(), x.dequantize())
        assert fast.shape == [2, 3]
        assert fast.allclose(ref, 1e-4)


def check_diagnostics():
    s = hbl.dist_stats(hbl.Tensor([4], [1.0, -1.0, 1.0, -1.0]))
    assert s["excess_kurtosis"] == -2.0
    spike = [0.0] * 64
    spike[0] = 100.0
    r = hbl.rotate_compare(hbl.Tensor([1, 64], spike), 4)
    assert r["mean_mse_rotated"] < r["mean_mse_direct"]
    h = hbl.histogram(hbl.Tensor([2], [-2.0, 2.0]), 2, -1.0, 1.0)
    assert (h["underflow"], h["overflow"]) == (1, 1)


def check_training():
    cfg = hbl.default_config()
    cfg.update(layers=1, hidden=16, glu=32, heads=2, vocab=8, seq_len=8,
               batch=4, steps_a8=9, steps_a4=1, warmup_steps=2)
    text = json.dumps(cfg)
    with tempfile.TemporaryDirectory() as d:
        a8 = hbl.train_stage(text, "a8", out=os.path.join(d, "a8"))
        assert a8["step"] == 9 and a8["diverged"] is None
        a4 = hbl.train_stage(text, "a4", resume=os.path.join(d, "a8"))
        assert a4["step"] == 10
        assert math.isfinite(a4["final_loss"])


def main():
    check_hadamard()
    check_quantizers()
    check_gemm()
    check_diagnostics()
    check_training()
    print("hbl smoke test ok")


if __name__ == "__main__":
    main()
