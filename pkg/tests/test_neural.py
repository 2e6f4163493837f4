import numpy as np
import pytest
import torch

from attennkf.neural import (
    AE_SPECS,
    DTYPE,
    Autoencoder,
    CrossAttention,
    GRUHead,
    MLP,
    NonFinite,
    ShapeMismatch,
    ZeroVector,
    cross_attention,
    gradient_check,
    gru_forward,
    gru_layers,
    load_checkpoint,
    load_module_state,
    loss_latent,
    loss_state,
    make_optimizer,
    mlp_forward,
    module_state,
    np_cross_attention,
    np_gru_forward,
    np_loss_latent,
    np_mlp_forward,
    save_checkpoint,
)

torch.set_num_threads(1)


def t(a):
    return torch.from_numpy(np.asarray(a, dtype=float))


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


@pytest.mark.parametrize("d_in,hidden,layers", [(4, 8, 1), (18, 16, 2), (9, 12, 3)])
def test_gru_matches_numpy_reference(d_in, hidden, layers):
    head = GRUHead(d_in, hidden, 5, layers)
    head.reset(gen(d_in))
    x = np.random.default_rng(0).standard_normal((3, 50, d_in))
    ref = np_gru_forward(x, gru_layers(head.gru))
    with torch.no_grad():
        out = gru_forward(t(x), head.gru).numpy()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_gru_single_sequence_and_initial_state():
    head = GRUHead(4, 6, 3, 2)
    head.reset(gen(1))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 4))
    h0 = rng.standard_normal((2, 1, 6))
    with torch.no_grad():
        out = gru_forward(t(x)[None], head.gru, t(h0))[0].numpy()
    np.testing.assert_allclose(out, np_gru_forward(x, gru_layers(head.gru), h0), atol=1e-12)


def test_gru_zero_weights_stay_at_zero_state():
    # all-zero parameters: z = 1/2, n = 0, so h stays at zero for any input
    head = GRUHead(3, 4, 2, 1)
    with torch.no_grad():
        for p in head.gru.parameters():
            p.zero_()
    x = np.random.default_rng(2).standard_normal((50, 3))
    np.testing.assert_array_equal(np_gru_forward(x, gru_layers(head.gru)), np.zeros((50, 4)))


def test_gru_shape_mismatch():
    head = GRUHead(4, 8, 2)
    with pytest.raises(ShapeMismatch):
        head(torch.zeros(1, 50, 5, dtype=DTYPE))
    with pytest.raises(ShapeMismatch):
        np_gru_forward(np.zeros((50, 5)), gru_layers(head.gru))


def test_nonfinite_input_detected():
    head = GRUHead(2, 4, 2)
    x = torch.zeros(1, 5, 2, dtype=DTYPE)
    x[0, 2, 1] = float("nan")
    with pytest.raises(NonFinite):
        head(x)


def test_attention_matches_numpy_and_rows_sum_to_one():
    att = CrossAttention(16, 32)
    att.reset(gen(3))
    rng = np.random.default_rng(3)
    zq, zkv = rng.standard_normal((2, 50, 16)), rng.standard_normal((2, 50, 32))
    with torch.no_grad():
        h, alpha = att(t(zq), t(zkv))
    ref_h, ref_a = np_cross_attention(zq, zkv, *(W.detach().numpy() for W in (att.W_q, att.W_k, att.W_v)))
    np.testing.assert_allclose(h.numpy(), ref_h, atol=1e-12)
    np.testing.assert_allclose(alpha.numpy(), ref_a, atol=1e-12)
    np.testing.assert_allclose(alpha.sum(-1).numpy(), 1.0, atol=1e-12)


def test_attention_uniform_when_keys_equal():
    rng = np.random.default_rng(4)
    zq = rng.standard_normal((50, 4))
    zkv = np.tile(rng.standard_normal(6), (50, 1))
    W = [rng.standard_normal(s) for s in ((4, 8), (6, 8), (6, 8))]
    h, alpha = cross_attention(t(zq), t(zkv), *(t(w) for w in W))
    np.testing.assert_allclose(alpha.numpy(), 1.0 / 50, atol=1e-15)
    np.testing.assert_allclose(h.numpy(), np.tile(zkv[0] @ W[2], (50, 1)), atol=1e-12)


def test_attention_large_logits_are_stable():
    rng = np.random.default_rng(5)
    zq, zkv = 1e3 * rng.standard_normal((10, 4)), 1e3 * rng.standard_normal((10, 4))
    W = t(np.eye(4))
    h, alpha = cross_attention(t(zq), t(zkv), W, W, W)
    assert torch.isfinite(h).all() and torch.isfinite(alpha).all()


def test_attention_history_mismatch():
    with pytest.raises(ShapeMismatch):
        cross_attention(torch.zeros(50, 4, dtype=DTYPE), torch.zeros(49, 4, dtype=DTYPE), *(torch.zeros(4, 4, dtype=DTYPE),) * 3)


def test_mlp_matches_numpy():
    mlp = MLP(32, 32, 64)
    mlp.reset(gen(6))
    x = np.random.default_rng(6).standard_normal((2, 50, 32))
    layers = [
        (mlp.hidden.weight.detach().numpy(), mlp.hidden.bias.detach().numpy(), "tanh"),
        (mlp.out.weight.detach().numpy(), mlp.out.bias.detach().numpy(), None),
    ]
    with torch.no_grad():
        np.testing.assert_allclose(mlp_forward(t(x), mlp).numpy(), np_mlp_forward(x, layers), atol=1e-12)


def test_latent_loss_zero_for_identical():
    z = t(np.random.default_rng(7).standard_normal((4, 50, 32)))
    assert loss_latent(z, z.clone()).item() == 0.0


@pytest.mark.parametrize("shape", [(32,), (50, 32), (3, 50, 32)])
def test_latent_loss_matches_numpy(shape):
    rng = np.random.default_rng(8)
    z, zh = rng.standard_normal(shape), rng.standard_normal(shape)
    assert loss_latent(t(z), t(zh)).item() == pytest.approx(np_loss_latent(z, zh), rel=1e-12)


def test_latent_loss_hand_computed():
    # z = [1, 0], z_hat = [0, 1]: mse 1, 1 - cos = 1, KL of swapped softmax pairs
    s = 1.0 / (1.0 + np.exp(-1.0))
    kl = (1 - s) * np.log((1 - s) / s) + s * np.log(s / (1 - s))
    expected = 1.0 + 0.1 * 1.0 + 0.01 * kl
    assert loss_latent(t([1.0, 0.0]), t([0.0, 1.0])).item() == pytest.approx(expected, abs=1e-14)


def test_latent_loss_rejects_zero_vector():
    with pytest.raises(ZeroVector):
        loss_latent(torch.zeros(32, dtype=DTYPE), torch.ones(32, dtype=DTYPE))


def test_state_loss_weights():
    pred = torch.zeros(2, 9, dtype=DTYPE)
    target = t(np.tile([1.0, 0, 0, 0, 2.0, 0, 0, 0, 3.0], (2, 1)))
    assert loss_state(pred, target, (1.0, 1.0, 1.0)).item() == 14.0
    assert loss_state(pred, target, (0.0, 0.0, 1.0)).item() == 9.0
    with pytest.raises(ShapeMismatch):
        loss_state(torch.zeros(2, 8, dtype=DTYPE), torch.zeros(2, 8, dtype=DTYPE))


def test_gradient_check_small_autoencoder():
    ae = Autoencoder(3, 5, 4, 1)
    ae.reset(gen(9))
    x = t(np.random.default_rng(9).standard_normal((2, 20, 3)))
    worst = gradient_check(lambda: torch.mean((ae(x) - x) ** 2), dict(ae.named_parameters()), eps=1e-4)
    assert len(worst) == 12
    assert max(worst.values()) < 1e-4


def test_adam_step_matches_formula():
    p = torch.nn.Parameter(t([1.0, -2.0]))
    opt = make_optimizer([p], lr=0.1)
    loss = (p**2).sum()
    loss.backward()
    opt.step()
    # first Adam step moves every coordinate by lr * sign(grad)
    np.testing.assert_allclose(p.detach().numpy(), [0.9, -1.9], atol=1e-7)


def test_reset_is_deterministic():
    a, b = Autoencoder.for_feature("error"), Autoencoder.for_feature("error")
    a.reset(gen(10))
    b.reset(gen(10))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_ae_specs_latent_widths():
    assert AE_SPECS["error"][2] == AE_SPECS["inekf"][2] == 32
    assert AE_SPECS["slip"][:3] == (4, 64, 16)


def test_checkpoint_roundtrip(tmp_path):
    ae = Autoencoder.for_feature("slip")
    ae.reset(gen(11))
    blocks = module_state(ae, "ae.")
    save_checkpoint(tmp_path / "m.ckpt", blocks, {"kind": "test", "n": 1})
    meta, back = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"kind": "test", "n": 1}
    fresh = Autoencoder.for_feature("slip")
    load_module_state(fresh, back, "ae.")
    for (_, pa), (_, pb) in zip(ae.named_parameters(), fresh.named_parameters()):
        assert torch.equal(pa, pb)


def test_checkpoint_shape_mismatch(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", module_state(Autoencoder.for_feature("slip"), "ae."), {})
    _, blocks = load_checkpoint(tmp_path / "m.ckpt")
    with pytest.raises((ShapeMismatch, KeyError)):
        load_module_state(Autoencoder.for_feature("error"), blocks, "ae.")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage-bytes-here")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
