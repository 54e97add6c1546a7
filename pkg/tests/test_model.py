import numpy as np
import pytest

from mitodann import tensor as T
from mitodann.layers import GrlConfig
from mitodann.losses import BatchLabels, LossConfig, batch_losses
from mitodann.model import (DannConfig, DannModel, StemConfig, load_checkpoint, parameters,
                            read_checkpoint, save_checkpoint)
from mitodann.optim import Adam
from mitodann.tensor import Tensor, ShapeError

TINY = StemConfig(stem_width=4, widths=(4, 8), blocks=(1, 1))


def tiny_cfg(**kw):
    kw.setdefault("stem", TINY)
    kw.setdefault("patch_size", 16)
    kw.setdefault("cell_hidden", 5)
    kw.setdefault("domain_hidden", 6)
    return DannConfig(**kw)


def images(n, s=16, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 3, s, s)))


def expected_parameter_count(cfg: DannConfig) -> int:
    """Closed form: convs carry no bias, every batch norm has a scale and a shift per channel."""
    st = cfg.stem
    total = st.stem_width * st.in_channels * st.stem_kernel ** 2 + 2 * st.stem_width
    c_in = st.stem_width
    for s, (w, count) in enumerate(zip(st.widths, st.blocks)):
        for b in range(count):
            stride = 2 if (s > 0 and b == 0) else 1
            total += w * c_in * 9 + 2 * w + w * w * 9 + 2 * w
            if stride != 1 or c_in != w:
                total += w * c_in + 2 * w
            c_in = w
    d_f, h_c, h_d = st.widths[-1], cfg.cell_hidden, cfg.domain_hidden
    total += d_f * h_c + h_c + 2 * h_c + h_c + 1
    extra = h_c if cfg.concat_intermediate else 0
    total += d_f * h_d + h_d + 2 * h_d + (h_d + extra) + 1
    return total


def test_output_shapes_and_range():
    model = DannModel(tiny_cfg())
    out = model(images(4))
    assert out.p_cell.shape == (4,) and out.p_domain.shape == (4,)
    for p in (out.p_cell.data, out.p_domain.data):
        assert np.all((p > 0) & (p < 1))
    assert out.features.shape == (4, 8)
    assert out.cell_hidden.shape == (4, 5)


@pytest.mark.parametrize("concat,width", [(False, 6), (True, 11)])
def test_domain_head_input_width(concat, width):
    model = DannModel(tiny_cfg(concat_intermediate=concat))
    assert model.domain_head.fc2.weight.shape == (1, width)
    assert model.domain_head.fc1.weight.shape == (6, 8)


def test_zero_stem_gives_half_probabilities():
    model = DannModel(tiny_cfg())
    for name, p in model.named_parameters():
        if name.startswith("stem.") and name.endswith("weight"):
            p.data[...] = 0
    out = model(images(5))
    np.testing.assert_array_equal(out.p_cell.data, 0.5)
    np.testing.assert_array_equal(out.p_domain.data, 0.5)


def test_rejects_wrong_geometry():
    model = DannModel(tiny_cfg())
    with pytest.raises(ShapeError):
        model(images(2, s=12))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((2, 1, 16, 16))))


def test_parameter_order_stable():
    a = [n for n, _ in DannModel(tiny_cfg()).named_parameters()]
    b = [n for n, _ in DannModel(tiny_cfg()).named_parameters()]
    assert a == b
    model = DannModel(tiny_cfg())
    assert [id(p) for p in parameters(model)] == [id(p) for p in parameters(model)]
    assert len({id(p) for p in parameters(model)}) == len(parameters(model))


def test_default_parameter_count():
    cfg = DannConfig()
    assert sum(p.size for p in DannModel(cfg).parameters()) == expected_parameter_count(cfg) == 326418


@pytest.mark.parametrize("cfg", [tiny_cfg(), tiny_cfg(concat_intermediate=False),
                                 DannConfig(stem=StemConfig.resnet18(), patch_size=32)])
def test_parameter_count_formula(cfg):
    assert sum(p.size for p in DannModel(cfg).parameters()) == expected_parameter_count(cfg)


def test_optimizer_step_moves_every_parameter_with_gradient():
    model = DannModel(tiny_cfg())
    before = [p.data.copy() for p in model.parameters()]
    out = model(images(8))
    labels = BatchLabels.for_training([0, 1, 0, 1, 0, 1, 0, 1], [0, 0, 0, 0, 1, 1, 1, 1])
    batch_losses(out.p_cell, out.p_domain, labels)[0].backward()
    Adam(model.parameters()).step(1e-3)
    for b, p in zip(before, model.parameters()):
        if p.grad is not None and np.any(p.grad != 0):
            assert not np.array_equal(b, p.data)
        else:
            assert np.array_equal(b, p.data)


def _grads(model, x, y_cell, y_domain, cfg=LossConfig()):
    model.zero_grad()
    out = model(x)
    total = batch_losses(out.p_cell, out.p_domain, BatchLabels.for_training(y_cell, y_domain), cfg)[0]
    total.backward()
    return {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in model.named_parameters()}


def test_target_only_batch_leaves_cell_head_untouched(f64):
    model = DannModel(tiny_cfg(concat_intermediate=False))
    g = _grads(model, images(6), [0, 1, 0, 1, 0, 1], [1] * 6)
    for name, grad in g.items():
        if name.startswith("cell_head."):
            assert np.all(grad == 0), name
    assert any(np.any(grad != 0) for n, grad in g.items() if n.startswith("stem."))


def test_target_only_batch_with_concat(f64):
    model = DannModel(tiny_cfg(concat_intermediate=True))
    g = _grads(model, images(6), [0, 1, 0, 1, 0, 1], [1] * 6)
    assert np.all(g["cell_head.fc2.weight"] == 0) and np.all(g["cell_head.fc2.bias"] == 0)
    assert np.any(g["cell_head.fc1.weight"] != 0)


def test_zero_reversal_matches_detached_domain_head(f64):
    x = images(8)
    y_c, y_d = [0, 1, 0, 1, 0, 1, 0, 1], [0, 0, 0, 0, 1, 1, 1, 1]
    cfg = LossConfig(gamma=1.0)
    m1 = DannModel(tiny_cfg(grl=GrlConfig(lam=0.0), seed=3))
    m2 = DannModel(tiny_cfg(grl=GrlConfig(lam=0.0), seed=3))
    m2.grl = lambda t: t.detach()
    g1 = _grads(m1, x, y_c, y_d, cfg)
    g2 = _grads(m2, x, y_c, y_d, cfg)
    for name in g1:
        if name.startswith("stem."):
            assert np.array_equal(g1[name], g2[name]), name
    assert any(np.any(g1[n] != 0) for n in g1 if n.startswith("domain_head."))


def test_domain_branch_gradient_zero_when_lambda_zero(f64):
    model = DannModel(tiny_cfg(grl=GrlConfig(lam=0.0)))
    model.zero_grad()
    out = model(images(6))
    T.tsum(T.log(out.p_domain)).backward()
    for name, p in model.named_parameters():
        if not name.startswith("domain_head."):
            assert p.grad is None or np.all(p.grad == 0), name


def test_model_gradcheck_both_heads(f64):
    from mitodann.tensor import gradcheck

    model = DannModel(tiny_cfg(patch_size=8,
                               stem=StemConfig(stem_width=3, stem_kernel=3, widths=(3, 4), blocks=(1, 1))))
    # reversal is not a true derivative; swap in identity so finite differences apply everywhere
    model.grl = lambda t: t
    x = images(4, s=8)
    labels = BatchLabels.for_training([0, 1, 0, 1], [0, 0, 1, 1])

    def f():
        out = model(x)
        return batch_losses(out.p_cell, out.p_domain, labels)[0]

    params = model.parameters()
    assert gradcheck(f, params) < 1e-4


def test_eval_mode_uses_running_stats():
    model = DannModel(tiny_cfg())
    x = images(6)
    model(x, mode="train")
    a = model(x, mode="eval").p_cell.data
    b = model(Tensor(x.data[:3]), mode="eval").p_cell.data
    np.testing.assert_allclose(a[:3], b, rtol=1e-5)


def test_checkpoint_round_trip(tmp_path):
    model = DannModel(tiny_cfg(seed=5))
    model(images(6), mode="train")
    opt = Adam(model.parameters())
    save_checkpoint(tmp_path / "m.ckpt", model, opt.state_dict(), {"step": 7}, {"note": "x"})
    loaded, header, optim = load_checkpoint(tmp_path / "m.ckpt")
    assert header["version"] == 1 and header["counters"] == {"step": 7}
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data) and p1.dtype == p2.dtype
    for (n1, b1), (_, b2) in zip(model.named_buffers(), loaded.named_buffers()):
        assert np.array_equal(b1, b2), n1
    x = images(4)
    assert np.array_equal(model(x, mode="eval").p_cell.data, loaded(x, mode="eval").p_cell.data)
    assert set(optim) == set(opt.state_dict())


def test_checkpoint_layout_is_little_endian(tmp_path):
    model = DannModel(tiny_cfg())
    save_checkpoint(tmp_path / "m.ckpt", model)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"MDANNCKP"
    header, _ = read_checkpoint(tmp_path / "m.ckpt")
    assert all(e["dtype"].startswith("<") for e in header["entries"])
    assert header["config"]["patch_size"] == 16


def test_checkpoint_bad_magic(tmp_path):
    from mitodann.model import CheckpointError

    (tmp_path / "bad").write_bytes(b"nope" * 10)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad")
