import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vqtlight.vqvae import (FingerprintMismatch, VQVAEConfig, VQVAENet, count_parameters, decode, encode,
                            load_vqvae, map_to_indices, quantize, save_vqvae, vqvae_loss)


def brute_force_nearest(z, cb):
    z = np.asarray(z, dtype=np.float64).reshape(-1, cb.shape[1])
    cb = np.asarray(cb, dtype=np.float64)
    out = []
    for v in z:
        d = [float(((v - e) ** 2).sum()) for e in cb]
        out.append(int(np.argmin(d)))  # argmin returns the first minimum
    return np.array(out)


@pytest.fixture(scope="module")
def paper_net():
    torch.manual_seed(0)
    return VQVAENet(VQVAEConfig()).eval()


def test_table1_shape_chain(paper_net):
    x = torch.rand(1, 3, 128, 128)
    z = paper_net.encode_log(x)
    assert z.shape == (1, 32, 32, 256)
    assert paper_net.encoder(x).shape == (1, 256, 32, 32)
    assert paper_net.decode_log(z).shape == (1, 3, 128, 128)


def test_table1_layers(paper_net):
    convs = [m for m in paper_net.encoder.net if isinstance(m, torch.nn.Conv2d)]
    assert [(c.in_channels, c.out_channels, c.kernel_size, c.stride) for c in convs] == [
        (3, 128, (4, 4), (2, 2)), (128, 256, (4, 4), (2, 2))]
    ups = [m for m in paper_net.decoder.net if isinstance(m, torch.nn.ConvTranspose2d)]
    assert [(u.in_channels, u.out_channels) for u in ups] == [(256, 128), (128, 32)]
    last = paper_net.decoder.net[-1]
    assert isinstance(last, torch.nn.Conv2d) and last.out_channels == 3 and last.kernel_size == (1, 1)
    norms = (torch.nn.BatchNorm2d, torch.nn.GroupNorm, torch.nn.LayerNorm, torch.nn.InstanceNorm2d)
    assert not any(isinstance(m, norms) for m in paper_net.modules())


def test_parameter_budget(paper_net):
    assert count_parameters(paper_net) < 10_000_000


def test_encode_shapes_and_determinism(paper_net, rng):
    sp = rng.uniform(0, 5, (128, 128, 3)).astype(np.float32)
    a = encode(sp, paper_net)
    assert a.shape == (32, 32, 256)
    assert np.array_equal(a, encode(sp, paper_net))


def test_encode_rejects_wrong_size(paper_net):
    with pytest.raises(ValueError, match="expected"):
        encode(np.ones((64, 64, 3), np.float32), paper_net)


def test_decode_shape_and_nonnegative(paper_net):
    z = torch.randn(32, 32, 256) * 3
    out = decode(z, paper_net)
    assert out.shape == (128, 128, 3)
    assert np.all(out >= 0) and np.all(np.isfinite(out))


def test_exact_match_picks_entry():
    cb = torch.randn(16, 8)
    z = torch.randn(4, 4, 8)
    z[1, 2] = cb[7]
    z_q, idx = quantize(z, cb)
    assert idx[1, 2] == 7
    assert torch.equal(z_q[1, 2], cb[7])


@pytest.mark.parametrize("k", [4, 64])
def test_quantize_matches_brute_force(k):
    g = torch.Generator().manual_seed(k)
    cb = torch.randn(k, 16, generator=g)
    z = torch.randn(8, 8, 16, generator=g)
    _, idx = quantize(z, cb)
    assert np.array_equal(idx.numpy().ravel(), brute_force_nearest(z.numpy(), cb.numpy()))


def test_quantize_tie_goes_to_lowest_index():
    cb = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    z = torch.tensor([[[0.0, 0.0]], [[1.0, 0.0]]])
    _, idx = quantize(z, cb)
    assert idx.tolist() == [[0], [0]]


def test_paper_sized_index_sequence():
    z_q, idx = quantize(torch.randn(32, 32, 256), torch.randn(128, 256))
    flat = idx.reshape(-1)
    assert flat.numel() == 1024 and flat.min() >= 0 and flat.max() < 128
    assert z_q.shape == (32, 32, 256)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_quantize_properties(k, d, seed):
    g = torch.Generator().manual_seed(seed)
    cb = torch.randn(k, d, generator=g)
    z = torch.randn(5, 3, d, generator=g)
    z_q, idx = quantize(z, cb)
    # every output equals a codebook row; idempotence; nearest-entry optimality
    assert torch.equal(z_q, cb[idx])
    z_q2, idx2 = quantize(z_q, cb)
    assert torch.equal(z_q2, z_q)
    assert torch.equal(cb[idx2], cb[idx])
    dists = ((z.reshape(-1, 1, d).double() - cb[None].double()) ** 2).sum(-1)
    chosen = dists.gather(1, idx.reshape(-1, 1))
    assert torch.all(chosen <= dists + 1e-12)


def test_quantize_depth_mismatch():
    with pytest.raises(ValueError):
        quantize(torch.randn(2, 2, 4), torch.randn(3, 5))


def test_loss_zero_when_exact():
    x = torch.rand(1, 3, 4, 4)
    z = torch.randn(2, 2, 2)
    total, _ = vqvae_loss(x, x, z, z)
    assert total.item() == 0.0


def test_loss_hand_computed():
    x = torch.rand(1, 3, 4, 4)
    z_e = torch.tensor([[[0.0, 1.0], [2.0, -1.0]], [[0.5, 0.5], [1.0, 1.0]]])
    z_q = torch.tensor([[[1.0, 1.0], [2.0, 1.0]], [[0.0, 0.5], [1.0, 3.0]]])
    # squared differences: 1, 0, 0, 4, 0.25, 0, 0, 4 -> mean 9.25 / 8
    total, terms = vqvae_loss(x, x, z_e, z_q, beta=0.25)
    assert np.isclose(terms["embedding"].item(), 9.25 / 8)
    assert np.isclose(total.item(), 1.25 * 9.25 / 8)


def test_loss_log_space():
    recon = torch.full((1, 3, 2, 2), np.e - 1)
    target = torch.zeros(1, 3, 2, 2)
    z = torch.zeros(1, 1, 1)
    _, terms = vqvae_loss(recon, target, z, z)
    assert np.isclose(terms["reconstruction"].item(), 1.0)


def test_stop_gradient_routing():
    z_e = torch.randn(3, 3, 4, requires_grad=True)
    cb = torch.randn(5, 4, requires_grad=True)
    z_q = cb[quantize(z_e, cb)[1]]
    x = torch.zeros(1, 3, 2, 2)
    _, terms = vqvae_loss(x, x, z_e, z_q)
    ge, gc = torch.autograd.grad(terms["embedding"], (z_e, cb), allow_unused=True)
    assert ge is None or torch.all(ge == 0)
    assert gc.abs().sum() > 0
    ge, gc = torch.autograd.grad(terms["commitment"], (z_e, cb), allow_unused=True)
    assert gc is None or torch.all(gc == 0)
    assert ge.abs().sum() > 0


def test_straight_through_copies_gradient():
    cfg = VQVAEConfig(side=16, latent=4, num_embeddings=8, embedding_dim=8, hidden=8)
    net = VQVAENet(cfg).double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    z_e = net.encode_log(x)
    z_q, _ = net.quantize(z_e)
    z_e.retain_grad()
    z_st = z_e + (z_q - z_e).detach()
    net.decode_log(z_st).square().mean().backward()
    zq_leaf = z_q.detach().clone().requires_grad_(True)
    net.decode_log(zq_leaf).square().mean().backward()
    # z_e + (z_q - z_e) equals z_q up to one rounding, so the two gradients agree to float64 precision
    assert torch.allclose(z_e.grad, zq_leaf.grad, rtol=1e-10, atol=1e-14)


def test_map_to_indices_row_major():
    cfg = VQVAEConfig(side=16, latent=4, num_embeddings=8, embedding_dim=8, hidden=8)
    net = VQVAENet(cfg).eval()
    sp = np.random.default_rng(0).uniform(0, 2, (2, 16, 16, 3)).astype(np.float32)
    idx = map_to_indices(sp, net)
    z = net.encode_log(torch.log1p(torch.as_tensor(sp).permute(0, 3, 1, 2)))
    _, grid = net.quantize(z)
    assert idx.shape == (2, 16)
    assert np.array_equal(idx, grid.reshape(2, -1).numpy())
    assert np.array_equal(idx[1].reshape(4, 4), grid[1].numpy())


def test_checkpoint_round_trip(tmp_path):
    cfg = VQVAEConfig(side=16, latent=4, num_embeddings=8, embedding_dim=8, hidden=8)
    net = VQVAENet(cfg)
    save_vqvae(tmp_path / "v.pt", net)
    back = load_vqvae(tmp_path / "v.pt", expect={"K": 8})
    for a, b in zip(net.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    with pytest.raises(FingerprintMismatch):
        load_vqvae(tmp_path / "v.pt", expect={"K": 128})


@pytest.mark.parametrize("latent", [16, 64])
def test_other_feature_resolutions(latent):
    net = VQVAENet(VQVAEConfig(latent=latent, hidden=32, embedding_dim=32))
    z = net.encode_log(torch.rand(1, 3, 128, 128))
    assert z.shape == (1, latent, latent, 32)
    assert net.decode_log(z).shape == (1, 3, 128, 128)
