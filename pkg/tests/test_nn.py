"""Network-module gradient checks (64-bit graphs vs finite differences),
AdamW against a step-by-step numpy oracle, and checkpoint round-trips."""

import numpy as np
import pytest

from conftest import finite_diff_grad, rel_err
from tractfuse import nn
from tractfuse.autodiff import Tensor

RNG = np.random.default_rng(3)


def upcast(params):
    for p in params.values():
        p.data = p.data.astype(np.float64)


def check_param_grads(module_params, run, tol=1e-6, h=1e-5):
    """Gradcheck every parameter of a module against finite differences."""
    upcast(module_params)
    loss = run()
    loss.backward()
    got = {k: p.grad.copy() for k, p in module_params.items()}
    for k, p in module_params.items():
        base = p.data.copy()

        def f(x):
            p.data = x
            out = float(run().data)
            p.data = base
            return out

        fd = finite_diff_grad(f, base, h=h)
        # absolute floor covers near-zero gradients where FD noise dominates
        ok = rel_err(got[k], fd) < tol or np.abs(got[k] - fd).max() < 1e-8
        assert ok, f"gradient mismatch for {k}"


def test_mlp_gradcheck():
    mlp = nn.Mlp(5, 2, hidden=6, rng=RNG)
    x = RNG.normal(size=(4, 5))
    check_param_grads(mlp.params(), lambda: (mlp(x) ** 2.0).sum())


def test_mlp_width_error_names_widths():
    mlp = nn.Mlp(5, 2, hidden=6, rng=RNG)
    with pytest.raises(ValueError, match="5"):
        mlp(np.zeros((1, 7)))


def test_gpt_stack_gradcheck():
    gpt = nn.GptBlockStack(width=6, n_blocks=1, n_tokens=5, p_drop=0.0, rng=RNG)
    x = RNG.normal(size=(2, 5, 6))
    check_param_grads(gpt.params(), lambda: (gpt(x) ** 2.0).sum(), tol=1e-5)


def test_gpt_stack_input_gradcheck():
    gpt = nn.GptBlockStack(width=4, n_blocks=1, n_tokens=6, p_drop=0.0, rng=RNG)
    upcast(gpt.params())
    x0 = RNG.normal(size=(1, 6, 4))

    def f(x):
        return float((gpt(Tensor(np.asarray(x, dtype=np.float64))) ** 2.0).sum().data)

    t = Tensor(x0, requires_grad=True, dtype=np.float64)
    (gpt(t) ** 2.0).sum().backward()
    assert rel_err(t.grad, finite_diff_grad(f, x0)) < 1e-5


def test_gpt_causality_by_perturbation():
    gpt = nn.GptBlockStack(width=8, n_blocks=2, n_tokens=7, p_drop=0.0,
                           rng=np.random.default_rng(0))
    x = RNG.normal(size=(1, 7, 8)).astype(np.float32)
    base = gpt(x).data
    for t in range(1, 7):
        pert = x.copy()
        pert[0, t, 0] += 1.0  # single channel: survives the layernorms
        out = gpt(pert).data
        np.testing.assert_array_equal(out[0, :t], base[0, :t])
        assert np.abs(out[0, t] - base[0, t]).max() > 1e-4


def test_gpt_pad_mask_blocks_padding():
    gpt = nn.GptBlockStack(width=8, n_blocks=1, n_tokens=6, p_drop=0.0,
                           rng=np.random.default_rng(0))
    x = RNG.normal(size=(1, 6, 8)).astype(np.float32)
    mask = np.array([[0, 0, 1, 1, 1, 1]], dtype=np.float32)
    base = gpt(x, pad_mask=mask).data
    pert = x.copy()
    pert[0, 0] += 5.0  # padded token must be invisible to real tokens
    out = gpt(pert, pad_mask=mask).data
    np.testing.assert_array_equal(out[0, 2:], base[0, 2:])


def test_gpt_token_overflow_error():
    gpt = nn.GptBlockStack(width=4, n_blocks=1, n_tokens=3, p_drop=0.0, rng=RNG)
    with pytest.raises(ValueError, match="3"):
        gpt(np.zeros((1, 4, 4), dtype=np.float32))


# -- AdamW --------------------------------------------------------------------

def adamw_oracle(x0, grads, lr, betas=(0.9, 0.999), eps=1e-8, wd=0.0, warmup=0):
    """Straight transcription of AdamW with bias correction and warmup."""
    x = np.asarray(x0, dtype=np.float64).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        lr_eff = lr * min(1.0, (t - 1) / warmup) if warmup > 0 else lr
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        mhat = m / (1 - betas[0] ** t)
        vhat = v / (1 - betas[1] ** t)
        x = x - lr_eff * (mhat / (np.sqrt(vhat) + eps) + wd * x)
    return x


@pytest.mark.parametrize("wd,warmup", [(0.0, 0), (0.01, 0), (0.0, 3)])
def test_adamw_matches_oracle(wd, warmup):
    p = nn.parameter(np.array([1.0, -2.0, 0.5]))
    p.data = p.data.astype(np.float64)
    opt = nn.AdamW({"p": p}, lr=0.1, weight_decay=wd, warmup=warmup)
    grads = [RNG.normal(size=3) for _ in range(6)]
    for g in grads:
        p.grad = g
        opt.step()
    expect = adamw_oracle([1.0, -2.0, 0.5], grads, lr=0.1, wd=wd, warmup=warmup)
    np.testing.assert_allclose(p.data, expect, rtol=1e-12)


def test_adamw_warmup_ramp():
    p = nn.parameter(np.zeros(1))
    opt = nn.AdamW({"p": p}, lr=1.0, warmup=4)
    assert opt.effective_lr() == 0.0
    opt.step_count = 2
    assert opt.effective_lr() == 0.5
    opt.step_count = 10
    assert opt.effective_lr() == 1.0


def test_adamw_rejects_nonfinite_grad():
    p = nn.parameter(np.zeros(2))
    opt = nn.AdamW({"wout": p}, lr=0.1)
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(ValueError, match="wout"):
        opt.step()


def test_adamw_skips_gradless_params():
    p = nn.parameter(np.ones(2))
    opt = nn.AdamW({"p": p}, lr=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(2))


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a.w": RNG.normal(size=(3, 4)).astype(np.float32),
               "b": np.float32(2.5).reshape(()),
               "c": RNG.normal(size=5).astype(np.float32)}
    path = tmp_path / "t.ckp"
    nn.save_checkpoint(path, tensors, meta={"algo": "td3", "hidden": "16"})
    loaded, meta = nn.load_checkpoint(path)
    assert meta == {"algo": "td3", "hidden": "16"}
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckp"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        nn.load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    path = tmp_path / "t.ckp"
    nn.save_checkpoint(path, {"a": np.ones(4, dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw + b"\x00\x00")
    with pytest.raises(ValueError, match="trailing"):
        nn.load_checkpoint(path)


def test_assign_params_shape_mismatch():
    p = nn.parameter(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="shape"):
        nn.assign_params({"p": p}, {"p": np.zeros((3, 3), dtype=np.float32)})
    with pytest.raises(KeyError, match="missing"):
        nn.assign_params({"p": p}, {})


def test_mlp_checkpoint_roundtrip(tmp_path):
    mlp = nn.Mlp(4, 2, hidden=5, rng=RNG)
    path = tmp_path / "mlp.ckp"
    nn.save_checkpoint(path, {k: v.data for k, v in mlp.params().items()})
    clone = nn.Mlp(4, 2, hidden=5, rng=np.random.default_rng(99))
    tensors, _ = nn.load_checkpoint(path)
    nn.assign_params(clone.params(), tensors)
    x = RNG.normal(size=(3, 4)).astype(np.float32)
    np.testing.assert_array_equal(mlp(x).data, clone(x).data)
