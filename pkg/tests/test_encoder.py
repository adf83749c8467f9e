import math

import numpy as np
import pytest
import torch

from sarseg.config import preset
from sarseg.encoder import (Adapter, Attention, Block, ImageEncoder, adapter_forward, attention, block_forward,
                            encoder_forward, patch_embed, window_partition, window_unpartition)
from sarseg.model import build_model


def set_linear(layer, weight, bias=None):
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(weight, dtype=layer.weight.dtype))
        layer.bias.copy_(torch.zeros_like(layer.bias) if bias is None else torch.as_tensor(bias))


# ---- adapters ---------------------------------------------------------------

@pytest.fixture
def hand_adapter():
    a = Adapter(2, 1)
    set_linear(a.down, [[2.0, 0.0]])
    set_linear(a.up, [[0.5], [1.0]])
    return a


def test_adapter_positive_branch(hand_adapter):
    out = adapter_forward(torch.tensor([3.0, -5.0]), hand_adapter)
    assert out.tolist() == [3.0, 6.0]


def test_adapter_relu_cuts(hand_adapter):
    out = adapter_forward(torch.tensor([-3.0, 5.0]), hand_adapter)
    assert out.tolist() == [0.0, 0.0]


def test_adapter_zero_init_outputs_zero():
    a = Adapter(16, 4)
    assert torch.count_nonzero(a.up.weight) == 0 and torch.count_nonzero(a.up.bias) == 0
    f = torch.randn(3, 5, 16) * 100
    assert torch.equal(a(f), torch.zeros_like(f))


# ---- attention --------------------------------------------------------------

def test_single_token_attention_is_projected_value():
    torch.manual_seed(0)
    attn = Attention(4, 2)
    x = torch.randn(1, 1, 4)
    v = attn.qkv(x)[..., 8:]
    assert torch.allclose(attention(x, attn), attn.proj(v), atol=1e-12)


def test_identical_tokens_give_identical_outputs():
    torch.manual_seed(1)
    attn = Attention(8, 2)
    x = torch.randn(1, 1, 8).repeat(1, 2, 1)
    out = attn(x)
    assert torch.equal(out[0, 0], out[0, 1])


def test_three_token_hand_oracle():
    # one head, d_head = 2, identity output projection
    attn = Attention(2, 1)
    wq = np.array([[1.0, 0.5], [0.0, 1.0]])
    wk = np.array([[0.5, -1.0], [1.0, 0.0]])
    wv = np.array([[2.0, 0.0], [1.0, -1.0]])
    set_linear(attn.qkv, np.vstack([wq, wk, wv]))
    set_linear(attn.proj, np.eye(2))
    x = np.array([[1.0, 2.0], [-1.0, 0.5], [0.0, -2.0]])
    out = attn(torch.tensor(x)[None])[0].detach().numpy()

    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    expected = np.zeros((3, 2))
    for i in range(3):
        scores = [sum(q[i, c] * k[j, c] for c in range(2)) / math.sqrt(2) for j in range(3)]
        w = [math.exp(s) for s in scores]
        w = [e / sum(w) for e in w]
        expected[i] = sum(w[j] * v[j] for j in range(3))
    assert np.allclose(out, expected, atol=1e-12)


def test_softmax_rows_and_shift_invariance():
    torch.manual_seed(2)
    attn = Attention(8, 2)
    x = torch.randn(2, 5, 8)
    # a shift along k's bias adds the same constant q.b to every logit of a row
    shifted = Attention(8, 2)
    shifted.load_state_dict(attn.state_dict())
    with torch.no_grad():
        shifted.qkv.bias[8:16] += 3.0
    q = attn.qkv(x)[..., :8].reshape(2, 5, 2, 4).transpose(1, 2)
    k = attn.qkv(x)[..., 8:16].reshape(2, 5, 2, 4).transpose(1, 2)
    rows = ((q @ k.transpose(-2, -1)) / 2).softmax(-1).sum(-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)
    assert torch.allclose(attn(x), shifted(x), atol=1e-10)


# ---- windows ----------------------------------------------------------------

@pytest.mark.parametrize("h,w,win", [(8, 8, 4), (7, 5, 3), (3, 3, 4)])
def test_window_round_trip(h, w, win):
    x = torch.randn(2, h, w, 6)
    windows, padded = window_partition(x, win)
    assert windows.shape[1:] == (win * win, 6)
    assert torch.equal(window_unpartition(windows, win, padded, (h, w)), x)


def test_window_equals_global_when_window_covers_grid():
    torch.manual_seed(3)
    glob = Block(16, 4, window_size=0, adapter_hidden=4)
    win = Block(16, 4, window_size=6, adapter_hidden=4)
    win.load_state_dict(glob.state_dict())
    x = torch.randn(2, 6, 6, 16)
    assert torch.allclose(glob(x), win(x), atol=1e-12)


# ---- blocks -----------------------------------------------------------------

def _layer_norm(v, w, b, eps=1e-6):
    mu = v.mean()
    return (v - mu) / np.sqrt(((v - mu) ** 2).mean() + eps) * w + b


def _gelu(v):
    return np.array([0.5 * t * (1 + math.erf(t / math.sqrt(2))) for t in v])


def test_block_one_token_straight_line():
    torch.manual_seed(4)
    blk = Block(4, 2, mlp_ratio=2.0, window_size=0, adapter_hidden=2)
    with torch.no_grad():
        for p in blk.parameters():
            p.copy_(torch.randn_like(p) * 0.5)
    x = torch.randn(1, 1, 1, 4)
    tsi = torch.randn(1, 1, 1, 4)
    out = block_forward(x, blk, tsi).detach().numpy().reshape(4)

    P = {k: v.detach().numpy() for k, v in blk.state_dict().items()}
    xt = x.numpy().reshape(4) + tsi.numpy().reshape(4)
    h = _layer_norm(xt, P["norm1.weight"], P["norm1.bias"])
    qkv = P["attn.qkv.weight"] @ h + P["attn.qkv.bias"]
    a = P["attn.proj.weight"] @ qkv[8:] + P["attn.proj.bias"]  # one token: softmax weight 1
    serial = P["adapter_serial.up.weight"] @ np.maximum(
        P["adapter_serial.down.weight"] @ a + P["adapter_serial.down.bias"], 0) + P["adapter_serial.up.bias"]
    xp = a + serial + xt
    y = _layer_norm(xp, P["norm2.weight"], P["norm2.bias"])
    mlp = P["mlp.2.weight"] @ _gelu(P["mlp.0.weight"] @ y + P["mlp.0.bias"]) + P["mlp.2.bias"]
    par = P["adapter_parallel.up.weight"] @ np.maximum(
        P["adapter_parallel.down.weight"] @ y + P["adapter_parallel.down.bias"], 0) + P["adapter_parallel.up.bias"]
    assert np.allclose(out, mlp + par + xp, atol=1e-12)


def test_zero_init_block_equals_plain_block():
    torch.manual_seed(5)
    adapted = Block(16, 4, window_size=2, adapter_hidden=4)
    plain = Block(16, 4, window_size=2, adapter_hidden=None)
    plain.load_state_dict({k: v for k, v in adapted.state_dict().items() if "adapter" not in k})
    x = torch.randn(2, 4, 4, 16)
    assert torch.equal(adapted(x), plain(x))


def test_no_adapter_block_has_no_adapter_params():
    blk = Block(16, 4, adapter_hidden=None)
    assert not [n for n, _ in blk.named_parameters() if "adapter" in n]


@pytest.mark.parametrize("name", ["desk-tiny"])
def test_block_preserves_shape(name):
    cfg = preset(name)
    enc = ImageEncoder(cfg).double()
    x = torch.randn(1, cfg.grid_size, cfg.grid_size, cfg.embed_dim)
    for blk in enc.blocks:
        assert blk(x).shape == x.shape


# ---- encoder ----------------------------------------------------------------

def test_patch_embed_of_zero_image_is_bias():
    cfg = preset("desk-tiny")
    enc = ImageEncoder(cfg).double()
    with torch.no_grad():
        enc.pos_embed.zero_()
    tokens = patch_embed(torch.zeros(1, 128, 128), enc)
    assert tokens.shape == (1, 8, 8, 64)
    assert torch.equal(tokens, enc.patch_proj.bias.expand(1, 8, 8, 64))


def test_patch_embed_rejects_wrong_size():
    enc = ImageEncoder(preset("desk-tiny")).double()
    with pytest.raises(ValueError, match="expects 128x128"):
        enc.patch_embed(torch.zeros(1, 96, 96))


def test_encoder_shapes_and_tsi_length():
    cfg = preset("desk-tiny")
    enc = ImageEncoder(cfg).double()
    img = torch.rand(2, 128, 128)
    assert encoder_forward(img, None, enc).shape == (2, 32, 8, 8)
    with pytest.raises(ValueError, match="fusion features"):
        enc(img, [torch.zeros(2, 8, 8, 64)] * 3)


def test_sam_base_embedding_shape_on_meta_device():
    cfg = preset("sam-base", num_classes=5)
    with torch.device("meta"):
        model, _ = build_model(cfg, dtype=torch.float32)
        tokens = model.encoder.patch_embed(torch.empty(1, 1024, 1024, dtype=torch.float32))
        emb = model.embed(torch.empty(1, 1024, 1024, dtype=torch.float32))
    assert tuple(tokens.shape) == (1, 64, 64, 768)
    assert tuple(emb.shape) == (1, 256, 64, 64)


def test_encoder_zero_init_collapse():
    on = preset("desk-tiny", tsi_enabled=False)
    off = preset("desk-tiny", tsi_enabled=False, adapters_enabled=False)
    model_on, _ = build_model(on, seed=7)
    model_off, _ = build_model(off, seed=7)
    model_off.encoder.load_state_dict(
        {k: v for k, v in model_on.encoder.state_dict().items() if "adapter" not in k})
    img = torch.rand(2, 128, 128, generator=torch.Generator().manual_seed(0))
    diff = (model_on.embed(img) - model_off.embed(img)).abs().max().item()
    assert diff < 1e-12
