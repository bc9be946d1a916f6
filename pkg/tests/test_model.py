import numpy as np
import pytest

from gradcheck_cases import tiny_config
from oracles import fd_gradient
from osgait import tensorcore as tc
from osgait.model import ABLATIONS, PCAA, Encoder, ModelConfig
from osgait.tensorcore import Tensor


def _windows(cfg, n=3, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.N_f, cfg.N_p, 4))


def test_default_config_matches_published_hyperparameters():
    cfg = ModelConfig()
    assert (cfg.N_p, cfg.N_f, cfg.K, cfg.head_width) == (150, 30, 32, 64)
    assert cfg.pointnet_widths == (512, 512, 512, 1024)
    assert cfg.dilations == (1, 2, 4, 1, 2, 4)
    assert cfg.temporal_filters == (16, 32, 64, 128, 256, 512)
    assert cfg.decoder_widths == (1125, 2250, 4500, 9000, 18000)
    assert cfg.eff_decoder[-1] == 4 * cfg.N_f * cfg.N_p == 18000


def test_default_encoder_outputs_k32():
    cfg = ModelConfig()
    enc = Encoder(cfg, np.random.default_rng(0))
    enc.train(False)
    with tc.no_grad():
        z = enc(Tensor(_windows(cfg, n=1)))
    assert z.shape == (1, 32)


def test_scale_factor_shrinks_widths_and_keeps_contracts():
    small = ModelConfig(N_p=32, N_f=10, scale_factor=1 / 8, min_width=4)
    assert small.eff_pointnet == (64, 64, 64, 128)
    assert small.eff_temporal == (4, 4, 8, 16, 32, 64)
    assert small.eff_head == 8
    assert small.eff_decoder[-1] == 4 * 10 * 32
    full = sum(p.data.size for p in PCAA(ModelConfig(N_p=32, N_f=10, scale_factor=1 / 4, min_width=4)).parameters())
    tiny = sum(p.data.size for p in PCAA(small).parameters())
    assert tiny < full


def test_encode_shape_check():
    model = PCAA(tiny_config())
    with pytest.raises(ValueError, match="expected windows"):
        model.encode(np.zeros((1, 5, 8, 4)))


def test_permutation_invariance_small():
    cfg = tiny_config()
    model = PCAA(cfg, seed=1).eval()
    x = _windows(cfg, n=2)
    rng = np.random.default_rng(2)
    with tc.no_grad():
        z = model.encode(x).data
        for _ in range(20):
            xp = x.copy()
            for b in range(2):
                for f in range(cfg.N_f):
                    xp[b, f] = xp[b, f, rng.permutation(cfg.N_p)]
            zp = model.encode(xp).data
            assert np.linalg.norm(zp - z) <= 1e-10 * np.linalg.norm(z)


def test_duplicated_batch_entry_gives_identical_latents_in_eval():
    cfg = tiny_config()
    model = PCAA(cfg, seed=3).eval()
    x = _windows(cfg, n=1)
    with tc.no_grad():
        z = model.encode(np.concatenate([x, x])).data
    np.testing.assert_array_equal(z[0], z[1])


def test_temporal_block_is_causal():
    cfg = tiny_config()
    model = PCAA(cfg, seed=4).eval()
    enc = model.encoder

    def temporal_features(x):
        B, F, P, _ = x.shape
        h = Tensor(x.reshape(B * F * P, 4))
        for blk in enc.pointnet:
            h = blk(h)
        h = h.reshape(B, F, P, h.shape[-1]).mean(axis=2)
        for blk in enc.temporal:
            h = blk(h)
        return h.data

    x = _windows(cfg, n=1)
    with tc.no_grad():
        base = temporal_features(x)
        for t in range(cfg.N_f):
            y = x.copy()
            y[:, t:] += 1.0
            out = temporal_features(y)
            np.testing.assert_array_equal(out[:, :t], base[:, :t])
            assert not np.allclose(out[:, t:], base[:, t:])


def test_decode_shape_and_determinism():
    cfg = tiny_config()
    model = PCAA(cfg, seed=5).eval()
    z = Tensor(np.random.default_rng(0).normal(size=(1, cfg.K)))
    with tc.no_grad():
        a = model.decode(Tensor(np.concatenate([z.data, z.data])))
    assert a.shape == (2, cfg.N_f, cfg.N_p, 4)
    np.testing.assert_array_equal(a.data[0], a.data[1])
    # channel-first reshape of the flat decoder output
    with tc.no_grad():
        flat = model.decoder(tc.elu(model.dec_head(z))).data.reshape(4, cfg.N_f, cfg.N_p)
    np.testing.assert_allclose(np.moveaxis(flat, 0, -1), model.decode(z).data[0])


def test_decode_unavailable_under_v3():
    model = PCAA(tiny_config().with_ablation("v3"))
    with pytest.raises(RuntimeError):
        model.decode(Tensor(np.zeros((1, 8))))


def test_classify_distribution_properties():
    cfg = tiny_config()
    model = PCAA(cfg, seed=6)
    z = Tensor(np.random.default_rng(1).normal(size=(5, cfg.K)) * 10)
    p = model.classify(z).data
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-9)
    assert np.all(p >= 0)
    model.classifier.weight.data[:] = 0
    model.classifier.bias.data[:] = 0
    np.testing.assert_allclose(model.classify(z).data, 1 / cfg.M)


def test_argmax_stable_under_logit_shift():
    logits = np.random.default_rng(2).normal(size=(6, 4))
    a = tc.softmax(Tensor(logits)).data.argmax(1)
    b = tc.softmax(Tensor(logits + 123.4)).data.argmax(1)
    np.testing.assert_array_equal(a, b)


def test_linear_discriminator_is_affine():
    cfg = tiny_config(critic_widths=())
    model = PCAA(cfg, seed=7)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(2, cfg.K + cfg.M))
    d = lambda v: float(model.discriminate(Tensor(v[None])).data[0, 0])
    for a in (0.0, 0.3, 1.7, -2.0):
        assert abs(d(a * x + (1 - a) * y) - (a * d(x) + (1 - a) * d(y))) <= 1e-10
    assert d(x) == d(x.copy())
    with pytest.raises(ValueError):
        model.discriminate(Tensor(np.zeros((1, cfg.K))))


def test_critic_gradient_norm_matches_fd():
    cfg = tiny_config()
    model = PCAA(cfg, seed=8)
    x = np.random.default_rng(4).normal(size=(3, cfg.K + cfg.M))
    norms = tc.gradient_norm_of_scalar_fn(model.critic, Tensor(x)).data
    for i in range(3):
        (g,) = fd_gradient(lambda r: float(model.critic(Tensor(r[None])).data[0, 0]), [x[i].copy()])
        assert abs(norms[i] - np.linalg.norm(g)) <= 1e-4 * max(1.0, np.linalg.norm(g))


@pytest.mark.parametrize("name", ABLATIONS)
def test_ablation_parameter_inventory(name):
    cfg = tiny_config().with_ablation(name)
    names = {n.split(".")[0] for n, _ in PCAA(cfg).named_parameters()}
    expected = {"encoder", "classifier", "critic", "cls_head", "dec_head", "decoder"}
    if name == "v1":
        expected |= {"centroid_mlp"}
    elif name == "v2":
        expected -= {"cls_head", "dec_head"}
    elif name == "v3":
        expected -= {"dec_head", "decoder"}
    assert names == expected


def test_v1_centroid_mlp_widths():
    cfg = tiny_config(centroid_mlp_widths=(16, 32, 64)).with_ablation("v1")
    mlp = PCAA(cfg).centroid_mlp
    shapes = [layer.weight.shape for layer in mlp.layers]
    assert shapes == [(cfg.M, 16), (16, 32), (32, 64), (64, cfg.K)]


def test_unknown_ablation_rejected():
    with pytest.raises(ValueError):
        ModelConfig().with_ablation("v9")


def test_parameter_groups_partition_the_model():
    model = PCAA(tiny_config().with_ablation("v1"))
    groups = [model.group(g) for g in ("autoencoder", "critic", "centroids")]
    ids = [id(p) for g in groups for p in g]
    assert len(ids) == len(set(ids)) == len(model.parameters())
    assert {id(p) for p in model.group("encoder")} <= {id(p) for p in groups[0]}
