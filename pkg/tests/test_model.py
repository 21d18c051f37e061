"""Masks, attention, task-guider update, forward invariants, checkpoints."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from saber.model import (
    LibraryTensors,
    ModelConfig,
    SaberModel,
    ForwardError,
    attend,
    build_task_mask,
    load_checkpoint,
    output_distribution,
    relevance_weight,
    save_checkpoint,
    update_task_guider,
    TaskLayerExtras,
)
from saber.store import DemoLibrary

from conftest import make_demo

torch.set_num_threads(1)


def _cfg(d=4, **kw):
    base = dict(d=d, n_layers=4, n_heads=2, task_layers=(1, 3), max_seq=8, n_records=6)
    base.update(kw)
    return ModelConfig(**base)


def _model(seed=0, **kw) -> SaberModel:
    m = SaberModel(_cfg(**kw))
    m.init_params(seed)
    return m


def _lib(n=6, dim=4) -> LibraryTensors:
    lib = DemoLibrary(dim=dim)
    for i in range(n):
        lib.add(make_demo(f"d{i}", dim=dim, task=f"task{i % 2}", seed=200 + i))
    return LibraryTensors.from_library(lib)


# ---- mask construction ----


def test_non_task_mask_is_plain_causal():
    embs = torch.randn(1, 5, 4, dtype=torch.float64)
    mask = build_task_mask(embs, [2, 3], None, 1.0, task_layer=False)[0]
    for i in range(5):
        for j in range(5):
            if j <= i:
                assert float(mask[i, j]) == 0.0
            else:
                assert math.isinf(float(mask[i, j])) and float(mask[i, j]) < 0


def test_task_mask_matches_independent_computation():
    """5x5 mask (BOS, query, 3 ICDs) recomputed with plain numpy."""
    gen = torch.Generator().manual_seed(9)
    embs = torch.randn(5, 4, dtype=torch.float64, generator=gen)
    t = torch.tensor([0.9, 0.5, 0.7, 0.3, 0.8], dtype=torch.float64)
    alpha = 1.3
    i_idx = [2, 3, 4]
    mask = build_task_mask(embs.unsqueeze(0), i_idx, t.unsqueeze(0), alpha, True)[0]

    e = embs.numpy()
    normed = e / np.linalg.norm(e, axis=1, keepdims=True)
    sims = normed @ normed.T
    scale = math.sqrt(4)
    expected = np.full((5, 5), -np.inf)
    for i in range(5):
        for j in range(5):
            if j <= i:
                expected[i, j] = 0.0
    for i in i_idx:
        for j in i_idx:
            if j <= i:
                expected[i, j] = sims[i, j] / scale * math.log(float(t[i]))
    for j in i_idx:  # query row attends forward over ICDs
        expected[1, j] = alpha * sims[1, j] / scale * math.log(float(t[1]))
    np.testing.assert_allclose(mask.numpy(), expected, atol=1e-12)


def test_task_mask_no_nan_rows_all_lengths():
    N = 4
    for L in range(1, N + 4):
        embs = torch.randn(2, L, 4, dtype=torch.float64)
        i_idx = [i for i in range(2, min(L, 2 + N))]
        t = torch.rand(2, L, dtype=torch.float64).clamp(1e-6, 1 - 1e-7)
        for task_layer in (False, True):
            mask = build_task_mask(embs, i_idx, t, 0.7, task_layer)
            finite_per_row = torch.isfinite(mask).sum(dim=-1)
            assert int(finite_per_row.min()) >= 1  # no starved row
            assert not torch.isnan(mask[torch.isfinite(mask)]).any()


def test_log_t_nonpositive_and_modulation_grows_near_floor():
    embs = torch.ones(1, 4, 4, dtype=torch.float64)
    i_idx = [2, 3]
    strong = build_task_mask(
        embs, i_idx, torch.full((1, 4), 1e-6, dtype=torch.float64), 1.0, True
    )[0]
    weak = build_task_mask(
        embs, i_idx, torch.full((1, 4), 0.99, dtype=torch.float64), 1.0, True
    )[0]
    assert abs(float(strong[3, 2])) > abs(float(weak[3, 2]))
    t = torch.rand(1, 4, dtype=torch.float64).clamp(1e-6, 1 - 1e-7)
    assert bool((torch.log(t) <= 0).all())


# ---- attention ----


def _identity_linear(d: int) -> nn.Linear:
    lin = nn.Linear(d, d).double()
    with torch.no_grad():
        lin.weight.copy_(torch.eye(d))
        lin.bias.zero_()
    return lin


def test_attend_zero_mask_is_plain_softmax_attention():
    d, L = 4, 3
    h = torch.randn(1, L, d, dtype=torch.float64)
    eye = [_identity_linear(d) for _ in range(4)]
    out = attend(h, torch.zeros(1, L, L, dtype=torch.float64), *eye, n_heads=1)
    logits = (h[0] @ h[0].T / math.sqrt(d)).numpy()
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out[0].detach().numpy(), probs @ h[0].numpy(), atol=1e-12)


def test_attend_single_position_returns_value_row():
    d = 4
    h = torch.randn(1, 1, d, dtype=torch.float64)
    eye = [_identity_linear(d) for _ in range(4)]
    out = attend(h, torch.zeros(1, 1, 1, dtype=torch.float64), *eye, n_heads=2)
    torch.testing.assert_close(out, h)


def test_attend_empty_support_raises():
    d = 4
    h = torch.randn(1, 2, d, dtype=torch.float64)
    eye = [_identity_linear(d) for _ in range(4)]
    mask = torch.full((1, 2, 2), float("-inf"), dtype=torch.float64)
    with pytest.raises(ForwardError, match="empty support"):
        attend(h, mask, *eye, n_heads=1, layer=2)


def test_attention_rows_sum_to_one_under_mask_policy():
    gen = torch.Generator().manual_seed(3)
    N = 4
    for L in range(1, N + 4):
        embs = torch.randn(1, L, 4, dtype=torch.float64, generator=gen)
        i_idx = [i for i in range(2, min(L, 2 + N))]
        t = torch.rand(1, L, dtype=torch.float64, generator=gen).clamp(1e-6, 1 - 1e-7)
        for task_layer in (False, True):
            mask = build_task_mask(embs, i_idx, t, 1.0, task_layer)
            raw = torch.randn(1, L, L, dtype=torch.float64, generator=gen)
            probs = torch.softmax(raw + mask, dim=-1)
            assert not torch.isnan(probs).any()
            torch.testing.assert_close(
                probs.sum(dim=-1), torch.ones(1, L, dtype=torch.float64),
                rtol=0, atol=1e-6,
            )


# ---- relevance and guider ----


def test_relevance_weight_clamped_to_open_interval():
    extras = TaskLayerExtras(4).double()
    with torch.no_grad():
        extras.mlp[2].bias.fill_(1000.0)  # saturate sigmoid at 1
    e = torch.randn(1, 3, 4, dtype=torch.float64)
    t = relevance_weight(torch.zeros(1, 4, dtype=torch.float64), e, extras.mlp, 1e-6)
    assert float(t.detach().max()) <= 1 - 1e-7
    with torch.no_grad():
        extras.mlp[2].bias.fill_(-1000.0)
    t = relevance_weight(torch.zeros(1, 4, dtype=torch.float64), e, extras.mlp, 1e-6)
    assert float(t.detach().min()) >= 1e-6


def test_update_task_guider_equal_rows_ignores_weights():
    extras = TaskLayerExtras(4).double()
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for lin in (extras.tg_q, extras.tg_k, extras.tg_v, extras.tg_o):
            lin.weight.normal_(0, 1, generator=gen)
    v = torch.randn(4, dtype=torch.float64, generator=gen)
    hidden = v.expand(3, 4)
    e_tg = torch.randn(4, dtype=torch.float64, generator=gen)
    out = update_task_guider(e_tg, hidden, extras)
    # attention over identical rows is exactly the projected value row
    expected = extras.tg_ln(e_tg + extras.tg_o(extras.tg_v(v)))
    torch.testing.assert_close(out, expected.detach(), rtol=0, atol=1e-12)


def test_update_task_guider_zero_attention_output_is_layernorm():
    extras = TaskLayerExtras(4).double()
    with torch.no_grad():
        extras.tg_o.weight.zero_()
        extras.tg_o.bias.zero_()
    e_tg = torch.randn(4, dtype=torch.float64)
    hidden = torch.randn(3, 4, dtype=torch.float64)
    out = update_task_guider(e_tg, hidden, extras)
    torch.testing.assert_close(out, extras.tg_ln(e_tg).detach())


# ---- output distribution ----


def test_output_distribution_cases():
    logits = torch.zeros(5, dtype=torch.float64)
    probs = output_distribution(logits, [])
    torch.testing.assert_close(probs, torch.full((5,), 0.2, dtype=torch.float64))
    probs = output_distribution(logits, [0, 3])
    expected = torch.tensor([0.0, 1 / 3, 1 / 3, 0.0, 1 / 3], dtype=torch.float64)
    torch.testing.assert_close(probs, expected)
    probs = output_distribution(logits, [0, 1, 2, 4])
    torch.testing.assert_close(probs[3], torch.tensor(1.0, dtype=torch.float64))
    with pytest.raises(ValueError, match="forbidden"):
        output_distribution(logits, [0, 1, 2, 3, 4])


# ---- full forward ----


def _forward_inputs(lib):
    gen = torch.Generator().manual_seed(21)
    img = torch.randn(4, dtype=torch.float64, generator=gen)
    q = torch.randn(4, dtype=torch.float64, generator=gen)
    inst = torch.randn(4, dtype=torch.float64, generator=gen)
    icds = torch.tensor([[1, 3]], dtype=torch.long)
    return img.unsqueeze(0), q.unsqueeze(0), inst, icds


def test_forward_deterministic_across_rebuilds():
    lib = _lib()
    img, q, inst, icds = _forward_inputs(lib)
    outs = []
    for _ in range(2):
        model = _model(seed=42)
        logits, _ = model.forward(lib, img, q, inst, icds, include_eos=True)
        outs.append(logits.detach())
    assert torch.equal(outs[0], outs[1])


def test_forward_logit_shape_and_finiteness():
    lib = _lib()
    model = _model()
    img, q, inst, icds = _forward_inputs(lib)
    logits, masks = model.forward(lib, img, q, inst, icds, include_eos=True)
    assert logits.shape == (1, 5, len(lib) + 3)
    assert torch.isfinite(logits).all()
    assert len(masks) == 2  # one per task layer


def test_forward_no_nan_all_lengths():
    lib = _lib()
    model = _model()
    img, q, inst, _ = _forward_inputs(lib)
    for n_icds in range(0, 5):
        for include_eos in (False, True):
            icds = torch.arange(n_icds, dtype=torch.long).unsqueeze(0)
            logits, _ = model.forward(lib, img, q, inst, icds, include_eos=include_eos)
            assert torch.isfinite(logits).all()


def test_causality_without_task_layers():
    """With no forward-attending query row the stack is strictly causal.

    (With task layers present, the query row's forward attention and the
    guider update couple every later row to the full sequence — which is
    why training factorizes the loss over prefix forwards.)
    """
    lib = _lib()
    model = _model(task_layers=())
    img, q, inst, icds = _forward_inputs(lib)
    seq, i_idx = model.encode_sequences(lib, img, q, icds, include_eos=True)
    e_tg0 = model.initial_guider(img, q, inst)
    demo = model.demo_token_embeddings(lib)

    base, _ = model.forward_embeddings(seq, i_idx, e_tg0, demo)
    mutated = seq.clone()
    mutated[0, 4] += 1.0  # perturb the last ICD position
    after, _ = model.forward_embeddings(mutated, i_idx, e_tg0, demo)
    # tolerance covers kernel blocking effects at f64 resolution
    for i in (0, 1, 2, 3):
        torch.testing.assert_close(base[0, i], after[0, i], rtol=0, atol=1e-13)
    assert not torch.allclose(base[0, 4], after[0, 4])


def test_query_row_sees_forward_only_through_task_layers():
    """The query row's output reacts to ICD changes; prefix forwards used at
    train/generate time therefore never expose unchosen demonstrations."""
    lib = _lib()
    model = _model()
    img, q, inst, icds = _forward_inputs(lib)
    seq, i_idx = model.encode_sequences(lib, img, q, icds, include_eos=True)
    e_tg0 = model.initial_guider(img, q, inst)
    demo = model.demo_token_embeddings(lib)
    base, _ = model.forward_embeddings(seq, i_idx, e_tg0, demo)
    mutated = seq.clone()
    mutated[0, 4] += 1.0
    after, _ = model.forward_embeddings(mutated, i_idx, e_tg0, demo)
    assert not torch.allclose(base[0, 1], after[0, 1])


def test_tied_head_is_stable_under_library_growth():
    lib_small = DemoLibrary(dim=4)
    for i in range(5):
        lib_small.add(make_demo(f"d{i}", seed=300 + i))
    model = _model()
    img, q, inst, icds = _forward_inputs(None)

    logits1, _ = model.forward(
        LibraryTensors.from_library(lib_small), img, q, inst, icds, include_eos=True
    )
    lib_small.add(make_demo("d_new", seed=999))
    logits2, _ = model.forward(
        LibraryTensors.from_library(lib_small), img, q, inst, icds, include_eos=True
    )
    torch.testing.assert_close(logits1[..., :5], logits2[..., :5], rtol=0, atol=1e-13)


def test_permuting_library_permutes_logits():
    demos = [make_demo(f"d{i}", seed=400 + i) for i in range(5)]
    lib_a = DemoLibrary(dim=4)
    for rec in demos:
        lib_a.add(rec)
    lib_b = DemoLibrary(dim=4)
    for rec in reversed(demos):
        lib_b.add(rec)
    model = _model()
    img, q, inst, _ = _forward_inputs(None)
    icds_a = torch.tensor([[0, 2]], dtype=torch.long)  # d0, d2
    icds_b = torch.tensor([[4, 2]], dtype=torch.long)  # same records in lib_b
    la, _ = model.forward(LibraryTensors.from_library(lib_a), img, q, inst, icds_a)
    lb, _ = model.forward(LibraryTensors.from_library(lib_b), img, q, inst, icds_b)
    perm = [4, 3, 2, 1, 0]
    torch.testing.assert_close(la[..., :5], lb[..., perm], rtol=0, atol=0)
    torch.testing.assert_close(la[..., 5:], lb[..., 5:], rtol=0, atol=0)


def test_sequence_length_overflow_raises():
    lib = _lib()
    model = _model()
    img, q, inst, _ = _forward_inputs(lib)
    icds = torch.arange(6, dtype=torch.long).unsqueeze(0)  # 6+3 > max_seq 8
    with pytest.raises(ForwardError, match="max_seq"):
        model.forward(lib, img, q, inst, icds, include_eos=True)


def test_special_ids_layout():
    assert SaberModel.special_ids(10) == (10, 11, 12)


def test_config_validation():
    with pytest.raises(ValueError, match="task_layers"):
        ModelConfig(d=4, n_layers=2, n_heads=2, task_layers=(3,))
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d=5, n_heads=2)


# ---- checkpoints ----


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = _model(seed=5)
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
    # reloaded params equal the f32-rounded originals
    orig = dict(model.named_parameters())
    for name, p in loaded.named_parameters():
        torch.testing.assert_close(
            p, orig[name].detach().to(torch.float32).to(torch.float64),
            rtol=0, atol=0,
        )


def test_checkpoint_format_and_trailing_bytes(tmp_path):
    model = _model()
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(model, path)
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(path)
    bad = str(tmp_path / "bad.ckpt")
    with open(bad, "wb") as fh:
        fh.write(b'{"format":"other/v1"}\n')
    with pytest.raises(ValueError, match="checkpoint format"):
        load_checkpoint(bad)
