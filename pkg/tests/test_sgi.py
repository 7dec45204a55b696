import json
import math
from pathlib import Path

import numpy as np
import pytest

from satd import tensor as T
from satd.encoders import Encoder, EncoderSpec, TextProjector, TokenGrid, VisionProjector, pool_patches
from satd.errors import ConfigurationError, DataError, InputError, ParameterError
from satd.optim import AdamW
from satd.sgi import (INSTRUCTIONS, AlignPair, FrozenFeatures, TextBank, TextEntry, build_prompt, pool_text,
                      project_text, prompt_id, prompt_manifest, pseudo_embed, sample_pairs, sgi_loss,
                      sgi_train_step, train_sgi, visual_descriptor, visual_descriptors)
from satd.synthetic import gen_synthetic
from satd.tensor import Tensor

GOLDEN = Path(__file__).parent / "data" / "pseudo_embed_golden.json"


def test_instruction_list():
    assert len(INSTRUCTIONS) == 5
    assert INSTRUCTIONS[0] == "Represent this satellite caption to align with its image"


def test_build_prompt():
    assert build_prompt("river delta", 0) == \
        "Represent this satellite caption to align with its image: river delta"
    assert build_prompt("", 3) == INSTRUCTIONS[3] + ": "
    assert build_prompt("x", 4) == build_prompt("x", 4)
    with pytest.raises(ParameterError):
        build_prompt("x", 5)


def test_pseudo_embed_deterministic_and_golden():
    a = pseudo_embed("some prompt", 16, 3)
    np.testing.assert_array_equal(a, pseudo_embed("some prompt", 16, 3))
    g = json.loads(GOLDEN.read_text())
    v = pseudo_embed(g["prompt"], g["d_t"], g["k"], g["seed"])
    expected = np.array([[float.fromhex(x) for x in row] for row in g["tokens"]])
    np.testing.assert_array_equal(v, expected)


def test_pseudo_embed_one_char_apart_is_dissimilar():
    rng = np.random.default_rng(0)
    letters = "abcdefghijklmnopqrstuvwxyz"
    sims = []
    for _ in range(100):
        base = "".join(rng.choice(list(letters), 12))
        i = int(rng.integers(12))
        other = base[:i] + letters[(letters.index(base[i]) + 1) % 26] + base[i + 1:]
        a = pseudo_embed(base, 256, 4).mean(axis=0)
        b = pseudo_embed(other, 256, 4).mean(axis=0)
        sims.append(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
    assert np.mean(sims) < 0.5


def test_pseudo_embed_rejects_bad_sizes():
    with pytest.raises(ParameterError):
        pseudo_embed("x", 0, 1)


def test_visual_descriptor_examples():
    c = Tensor([0.5, -1.0])
    d = visual_descriptor(TokenGrid(c, Tensor(np.tile(c.data, (3, 1))), (1, 3)))
    np.testing.assert_array_equal(d.data, [0.5, -1.0, 0.5, -1.0])
    d = visual_descriptor(TokenGrid(Tensor([1.0, 2.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), (1, 2)))
    np.testing.assert_array_equal(d.data, [1, 2, 2, 3])
    rng = np.random.default_rng(1)
    t = TokenGrid(Tensor(rng.normal(size=6)), Tensor(rng.normal(size=(12, 6))), (3, 4))
    np.testing.assert_allclose(visual_descriptor(t).data[6:], pool_patches(t).data, rtol=0, atol=1e-12)
    with pytest.raises(InputError):
        visual_descriptor(TokenGrid(Tensor([1.0]), Tensor(np.zeros((0, 1))), (0, 0)))


def test_batched_descriptors_match_single():
    rng = np.random.default_rng(2)
    tok = rng.normal(size=(3, 5, 4))
    batch = visual_descriptors(Tensor(tok.reshape(15, 4)), 5).data
    for i in range(3):
        single = visual_descriptor(TokenGrid(Tensor(tok[i, 0]), Tensor(tok[i, 1:]), (2, 2))).data
        np.testing.assert_allclose(batch[i], single, rtol=0, atol=1e-15)


def test_pool_text_modes():
    tok = Tensor([[1.0, 0.0], [3.0, 2.0]])
    np.testing.assert_array_equal(pool_text(tok).data, [2, 1])
    np.testing.assert_array_equal(pool_text(tok, "bos").data, [1, 0])
    np.testing.assert_array_equal(pool_text(tok, "eos").data, [3, 2])
    np.testing.assert_array_equal(pool_text(Tensor([[0.3, 0.7]])).data, [0.3, 0.7])
    with pytest.raises(InputError):
        pool_text(Tensor(np.zeros((0, 2))))
    with pytest.raises(ConfigurationError):
        pool_text(tok, "max")


def test_project_text():
    z = Tensor([0.5, -1.0, 2.0, 0.0])
    np.testing.assert_array_equal(project_text(TextProjector(4, 4, init="zeros"), z).data, np.zeros(4))
    np.testing.assert_array_equal(project_text(TextProjector(4, 4, init="identity"), z).data, z.data)
    assert project_text(TextProjector(4, 6, seed=2), z).shape == (6,)


def test_infonce_exact_values():
    rng = np.random.default_rng(3)
    assert float(sgi_loss(rng.normal(size=(1, 6)), rng.normal(size=(1, 6))).data) == 0.0
    eye = np.eye(2)
    assert abs(float(sgi_loss(eye, eye, 1.0).data) - (-math.log(math.e / (math.e + 1)))) < 1e-9
    with pytest.raises(ParameterError):
        sgi_loss(eye, eye, 0.0)


def test_infonce_symmetry_scale_and_permutation():
    rng = np.random.default_rng(4)
    for _ in range(100):
        b = int(rng.integers(2, 8))
        zv, zt = rng.normal(size=(b, 6)), rng.normal(size=(b, 6))
        base = float(sgi_loss(zv, zt).data)
        assert base >= 0
        assert abs(float(sgi_loss(zt, zv).data) - base) <= 1e-12
        scale = rng.uniform(0.1, 10, (b, 1))
        assert abs(float(sgi_loss(zv * scale, zt).data) - base) <= 1e-12
        perm = rng.permutation(b)
        assert abs(float(sgi_loss(zv[perm], zt[perm]).data) - base) <= 1e-12
    zv, zt = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    assert float(sgi_loss(zv, zt + 3.0).data) != float(sgi_loss(zv, zt).data)


def test_infonce_sharpening_on_dominant_positives():
    rng = np.random.default_rng(5)
    for _ in range(50):
        zt = rng.normal(size=(4, 8))
        zv = zt + rng.normal(0, 0.2, size=(4, 8))
        s = T.cosine_sim_matrix(Tensor(zv), Tensor(zt)).data
        if not np.all(np.argmax(s, axis=1) == np.arange(4)):
            continue
        gaps = []
        for tau in (1.0, 0.5, 0.1, 0.07):
            p = T.softmax_temp(Tensor(s), tau).data
            off = np.where(np.eye(4, dtype=bool), -np.inf, p)
            gaps.append(np.diag(p) - off.max(axis=1))
        assert all(np.all(b >= a - 1e-15) for a, b in zip(gaps, gaps[1:]))


def test_infonce_gradient_check():
    rng = np.random.default_rng(6)
    zv, zt = Tensor(rng.uniform(-2, 2, (4, 6))), Tensor(rng.uniform(-2, 2, (4, 6)))
    assert T.grad_check(lambda a, b: sgi_loss(a, b, 0.5), [zv, zt]) <= 1e-4


def _bank(captions, d_t=8):
    return TextBank.from_manifest(prompt_manifest(captions), d_t)


def test_text_bank_immutable_and_counts_lookups():
    bank = _bank(["a", "b"])
    assert len(bank) == 10
    pid = prompt_id(build_prompt("a", 0))
    tok = bank.lookup(pid)
    assert bank.lookups == 1
    with pytest.raises(ValueError):
        tok[0, 0] = 1.0
    with pytest.raises(TypeError):
        bank.entries["x"] = None
    with pytest.raises(DataError):
        bank.lookup("missing")


def test_text_bank_rejects_ragged_widths():
    with pytest.raises(DataError):
        TextBank({"p": TextEntry(np.zeros((2, 3)), "c", "i")}, d_t=4)


def test_prompt_manifest_rows():
    rows = prompt_manifest(["a", "b", "a"])
    assert len(rows) == 10
    assert rows[0]["prompt"] == build_prompt("a", 0)
    assert all(r["prompt_id"] == prompt_id(r["prompt"]) for r in rows)


def test_sample_pairs_deterministic():
    items = [(f"i{k}", ["x", "y"]) for k in range(6)]
    assert sample_pairs(items, 2, 0) == sample_pairs(items, 2, 0)
    assert sample_pairs(items, 2, 0) != sample_pairs(items, 3, 0)


def _toy(d_t=16):
    ds = gen_synthetic(32, 6, 16, 16, seed=1)
    enc = Encoder(EncoderSpec("rgb", 3, 4, 8, weights_seed=2))
    images = {it["id"]: ds.images[i][:3] for i, it in enumerate(ds.items)}
    features = FrozenFeatures(enc, images, ds.stats("rgb"))
    bank = _bank([c for it in ds.items for c in it["captions"]], d_t)
    items = [(it["id"], it["captions"]) for it in ds.items]
    return ds, enc, features, bank, items


def test_train_step_caches_and_freezes():
    ds, enc, features, bank, items = _toy()
    g_v, g_t = VisionProjector(8, 4, seed=0), TextProjector(16, 16, seed=1)
    opt = AdamW(g_v.stage2_params() + g_t.parameters())
    pairs = sample_pairs(items[:6], 0, 0)
    digest = enc.digest()
    before = bank.lookups
    sgi_train_step(pairs, features, g_v, g_t, bank, 0.07, opt, 1e-3)
    assert bank.lookups - before == 6
    assert enc.digest() == digest
    assert g_v.params["head_k.w"].grad is None
    with pytest.raises(DataError):
        sgi_train_step([AlignPair(items[0][0], "nope")], features, g_v, g_t, bank, 0.07, opt, 1e-3)
    with pytest.raises(ConfigurationError):
        sgi_train_step(pairs, features, g_v, g_t, bank, 0.07, AdamW(g_t.parameters()), 1e-3)


def test_bank_tensors_receive_no_gradient():
    ds, enc, features, bank, items = _toy()
    g_t = TextProjector(16, 16, seed=1)
    pid = sample_pairs(items[:1], 0, 0)[0].prompt_id
    tokens = Tensor(bank.lookup(pid), requires_grad=False)
    out = T.tsum(g_t(pool_text(tokens)))
    out.backward()
    assert tokens.grad is None and g_t.params["w"].grad is not None


def test_toy_loss_decreases():
    ds, enc, features, bank, items = _toy()
    g_v, g_t = VisionProjector(8, 4, seed=0), TextProjector(16, 16, seed=1)
    losses = train_sgi(items, features, g_v, g_t, bank, 500, 16, 3e-3, seed=0)
    assert np.mean(losses[-20:]) < losses[0]
