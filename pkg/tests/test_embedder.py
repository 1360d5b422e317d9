import numpy as np
import pytest
import torch

from cxrsearch import embedder
from cxrsearch.embedder import EmbedderConfig, init_model
from cxrsearch.errors import HashMismatch, InvalidConfig, SchemaError, ShapeMismatch
from cxrsearch.preprocess import ImageBuffer

# tiny config keeps forward passes fast; grid = side / 16
TINY = EmbedderConfig(input_side=64, stage2_grid=4, feature_dim=32, proj_hidden=24, seed=0)


def rand_image(seed=0, side=64):
    return ImageBuffer(np.random.default_rng(seed).random((side, side), dtype=np.float32))


def test_init_deterministic():
    a = init_model(TINY)
    b = init_model(TINY)
    assert a.content_hash == b.content_hash
    c = init_model(EmbedderConfig(**{**TINY.to_json(), "seed": 1}))
    assert c.content_hash != a.content_hash


def test_config_grid_stride_invariant():
    EmbedderConfig(input_side=256, stage2_grid=16)  # full-scale 16x16 grid accepted
    with pytest.raises(InvalidConfig):
        EmbedderConfig(input_side=256, stage2_grid=17)
    with pytest.raises(InvalidConfig):
        EmbedderConfig(input_side=64, stage2_grid=4, embed_dim=16)


def test_embed_unit_norm_and_shape():
    model = init_model(TINY)
    for seed in range(5):
        v = embedder.embed(model, rand_image(seed))
        assert v.shape == (TINY.embed_dim,)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-5


def test_embed_pure_in_eval_mode():
    model = init_model(TINY)
    img = rand_image(3)
    np.testing.assert_array_equal(embedder.embed(model, img), embedder.embed(model, img))


def test_embed_shape_mismatch():
    model = init_model(TINY)
    with pytest.raises(ShapeMismatch):
        embedder.embed(model, rand_image(0, side=32))


def test_forced_ones_mask_equals_no_attention():
    model = init_model(TINY)
    img = rand_image(11)
    x = torch.from_numpy(img.pixels)[None, None]
    ones = torch.ones(1, 1, TINY.stage2_grid, TINY.stage2_grid)
    with torch.no_grad():
        forced = model.net(x, forced_mask=ones)[0].numpy()
    off = embedder.embed_no_attention(model, img)
    assert np.abs(forced - off).max() < 1e-6


def test_embed_differs_with_nonconstant_mask():
    # after a couple of arbitrary parameter nudges the mask is non-constant,
    # so the attention path must diverge from the bypass path
    model = init_model(TINY)
    with torch.no_grad():
        for p in model.net.attention.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=torch.Generator().manual_seed(1)))
    img = rand_image(4)
    on = embedder.embed(model, img)
    off = embedder.embed_no_attention(model, img)
    assert np.linalg.norm(on - off) > 0


def test_attention_map_contract():
    model = init_model(TINY)
    mask = embedder.attention_map(model, rand_image(5))
    assert mask.shape == (TINY.stage2_grid, TINY.stage2_grid)
    assert mask.min() >= 0.0 and mask.max() <= 1.0


def test_default_grid_is_16():
    cfg = EmbedderConfig()
    assert cfg.stage2_grid == 16 and cfg.input_side == 256


def test_features_shape_and_finite_on_zero_image():
    model = init_model(TINY)
    f = embedder.features(model, rand_image(6))
    assert f.shape == (TINY.feature_dim,)
    z = embedder.features(model, ImageBuffer(np.zeros((64, 64), dtype=np.float32)))
    assert np.all(np.isfinite(z))
    e = embedder.embed(model, ImageBuffer(np.zeros((64, 64), dtype=np.float32)))
    assert abs(np.linalg.norm(e) - 1.0) < 1e-5


def test_checkpoint_round_trip(tmp_path):
    model = init_model(TINY)
    embedder.save_checkpoint(model, tmp_path / "ckpt")
    loaded = embedder.load_checkpoint(tmp_path / "ckpt")
    assert loaded.content_hash == model.content_hash
    for seed in range(10):
        img = rand_image(seed + 100)
        a = embedder.embed(model, img)
        b = embedder.embed(loaded, img)
        assert np.abs(a - b).max() < 1e-6


def test_checkpoint_tamper_detected(tmp_path):
    model = init_model(TINY)
    out = embedder.save_checkpoint(model, tmp_path / "ckpt")
    state = torch.load(out / "weights.bin", weights_only=True)
    first = next(iter(state))
    state[first] = state[first] + 1.0
    torch.save(state, out / "weights.bin")
    with pytest.raises(HashMismatch):
        embedder.load_checkpoint(out)


def test_checkpoint_missing_files(tmp_path):
    with pytest.raises(SchemaError):
        embedder.load_checkpoint(tmp_path / "nothing")


def test_embed_batch_matches_single():
    model = init_model(TINY)
    images = [rand_image(s) for s in range(7)]
    batch = embedder.embed_batch(model, images, batch_size=3)
    single = np.stack([embedder.embed(model, img) for img in images])
    np.testing.assert_allclose(batch, single, atol=1e-6)


def test_jacobian_sanity_finite_differences():
    # d(sum of embedding)/d(theta) for 20 random parameters, eval mode
    model = init_model(TINY)
    net = model.net.double()
    img = rand_image(8)
    x = torch.from_numpy(img.pixels.astype(np.float64))[None, None]

    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    net(x).sum().backward()

    rng = np.random.default_rng(0)
    checked = 0
    eps = 1e-5
    while checked < 20:
        p = params[int(rng.integers(len(params)))]
        flat = p.detach().reshape(-1)
        j = int(rng.integers(flat.numel()))
        grad = p.grad.reshape(-1)[j].item()
        with torch.no_grad():
            orig = flat[j].item()
            flat[j] = orig + eps
            up = net(x).sum().item()
            flat[j] = orig - eps
            down = net(x).sum().item()
            flat[j] = orig
        fd = (up - down) / (2 * eps)
        scale = max(abs(grad), abs(fd), 1e-8)
        assert abs(grad - fd) / scale < 1e-3, (grad, fd)
        checked += 1
