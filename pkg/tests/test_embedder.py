import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualedit.denoiser import ToyCodec
from dualedit.embedder import (EmbedderTrainConfig, ToyEmbedder, alignment_score, embedder_dataset, gram_matrix,
                               load_embedder, retrieval_accuracy, save_embedder, self_similarity_distance,
                               train_toy_embedder, check_tokens)
from dualedit.errors import InvalidArgument
from dualedit.toydata import COLORS, SHAPES, ToyScene, all_scenes, render

from conftest import make_tiny_embedder

# ---------------------------------------------------------------- untrained properties


def test_embeddings_are_unit_norm(tiny_embedder):
    imgs = torch.tensor(np.stack([render(s, 0) for s in all_scenes()[:10]]), dtype=torch.float64)
    assert torch.allclose(tiny_embedder.embed_image(imgs).norm(dim=-1), torch.ones(10, dtype=torch.float64))
    txt = tiny_embedder.embed_tokens(torch.tensor([s.tokens() for s in all_scenes()[:10]]))
    assert torch.allclose(txt.norm(dim=-1), torch.ones(10, dtype=torch.float64))


def test_alignment_score_range_and_caption_forms(tiny_embedder):
    img = render(ToyScene(), 0)
    a = alignment_score(img, ToyScene(), tiny_embedder)
    assert -100.0 <= a <= 100.0
    assert a == pytest.approx(alignment_score(img, ToyScene().caption, tiny_embedder), abs=1e-9)


def test_alignment_trivial_cases():
    """With a text tower rigged to return the image embedding, score hits +-100 and 0."""
    emb = make_tiny_embedder()
    img = torch.tensor(render(ToyScene(), 0), dtype=torch.float64)
    e = emb.embed_image(img[None])[0]
    ortho = torch.linalg.svd(e[None]).Vh[-1]
    for target, want in ((e, 100.0), (-e, -100.0), (ortho, 0.0)):
        emb.embed_text = lambda caption, t=target: t
        assert alignment_score(img, ToyScene(), emb) == pytest.approx(want, abs=1e-6)


def test_self_similarity_identical_is_zero(tiny_embedder):
    img = render(ToyScene(), 3)
    assert self_similarity_distance(img, img, tiny_embedder) == 0.0


@settings(max_examples=20)
@given(st.integers(0, 143), st.integers(0, 143), st.integers(0, 143), st.integers(0, 50))
def test_self_similarity_is_a_pseudometric(i, j, k, seed):
    emb = make_tiny_embedder()
    scenes = all_scenes()
    a, b, c = (render(scenes[x], seed + n) for n, x in enumerate((i, j, k)))
    dab, dba = self_similarity_distance(a, b, emb), self_similarity_distance(b, a, emb)
    assert dab >= 0 and dab == pytest.approx(dba, abs=1e-9)
    assert dab <= self_similarity_distance(a, c, emb) + self_similarity_distance(c, b, emb) + 1e-9


def test_gram_matrix_of_known_features():
    f = torch.tensor([[[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]]])
    g = gram_matrix(f)[0]
    s = 1 / np.sqrt(2)
    want = torch.tensor([[1, 0, s], [0, 1, s], [s, s, 1]], dtype=torch.float32)
    assert torch.allclose(g, want, atol=1e-6)


def test_embed_image_differentiable_through_decode():
    emb = make_tiny_embedder(2)
    codec = ToyCodec()
    z = codec.encode(torch.tensor(render(ToyScene(color="blue"), 1), dtype=torch.float64)).requires_grad_(True)
    txt = emb.embed_text(ToyScene(color="red"))

    def f(zz):
        return (emb.embed_image(codec.decode(zz)[None])[0] * txt).sum()

    (g,) = torch.autograd.grad(f(z), z)
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(5):
        idx = tuple(int(rng.integers(0, d)) for d in (3, 16, 16))
        e = torch.zeros_like(z)
        e[idx] = h
        fd = (f(z + e) - f(z - e)).item() / (2 * h)
        assert fd == pytest.approx(g[idx].item(), rel=1e-4, abs=1e-9)


def test_check_tokens_rejects_bad_rows():
    with pytest.raises(InvalidArgument):
        check_tokens(torch.tensor([[0, 0, 0, 0]]))
    with pytest.raises(InvalidArgument):
        check_tokens(torch.tensor([[0, 9, 0, 0, 0]]))


def test_unknown_caption_token_rejected(tiny_embedder):
    with pytest.raises(InvalidArgument):
        tiny_embedder.embed_text("a large purple square at center, plain background")


def test_short_training_is_seeded_and_learns():
    scenes = all_scenes()[:24]
    data = embedder_dataset(2, 0, scenes)
    cfg = EmbedderTrainConfig(steps=80, batch_size=16, seed=3)
    a = train_toy_embedder(*data, cfg, heldout=data)
    b = train_toy_embedder(*data, cfg, heldout=data)
    assert a.loss_curve == b.loss_curve
    assert a.loss_curve[-1][1] < a.loss_curve[0][1]


def test_embedder_round_trip(tmp_path, tiny_embedder):
    from dualedit.embedder import EmbedderCheckpoint

    model = ToyEmbedder(tiny_embedder.arch)
    path = tmp_path / "emb.pt"
    save_embedder(path, EmbedderCheckpoint(model, 0.5, [(1, 2.0)]))
    back = load_embedder(path)
    img = torch.tensor(render(ToyScene(), 0))[None]
    with torch.no_grad():
        assert torch.equal(model.embed_image(img), back.model.embed_image(img))
    assert back.heldout_accuracy == 0.5


# ---------------------------------------------------------------- trained model


def two_attribute_set(seed):
    """Shape x colour with the other fields fixed: 12 captions."""
    scenes = [ToyScene(shape=s, color=c) for s in SHAPES for c in COLORS]
    return embedder_dataset(2, seed, scenes)


def test_trained_retrieval_on_two_attribute_set(trained_embedder):
    assert retrieval_accuracy(trained_embedder.model, *two_attribute_set(321)) > 0.9


def test_trained_retrieval_on_full_heldout(trained_embedder):
    assert retrieval_accuracy(trained_embedder.model, *embedder_dataset(1, 4242)) > 0.9


def test_untrained_near_chance():
    with torch.random.fork_rng():
        torch.manual_seed(11)
        fresh = ToyEmbedder()
    assert retrieval_accuracy(fresh, *two_attribute_set(321)) < 0.4


def test_matched_beats_mismatched_alignment(trained_embedder):
    emb = trained_embedder.model
    scenes = all_scenes()
    rng = np.random.default_rng(0)
    matched, mismatched = [], []
    for i in rng.choice(len(scenes), 30, replace=False):
        img = render(scenes[i], 900 + int(i))
        matched.append(alignment_score(img, scenes[i], emb))
        mismatched.append(alignment_score(img, scenes[(i + 37) % len(scenes)], emb))
    assert np.mean(matched) > np.mean(mismatched) + 10


def test_colour_change_keeps_structure_closer_than_shape_change(trained_embedder):
    """Gram distance reacts more to a new layout than to a recolouring."""
    emb = trained_embedder.model
    d_colour, d_shape = [], []
    for seed in range(5):
        src = ToyScene(shape="square", color="red", size="large")
        base = render(src, seed)
        d_colour.append(self_similarity_distance(base, render(ToyScene(shape="square", color="blue", size="large"),
                                                                seed), emb))
        d_shape.append(self_similarity_distance(base, render(ToyScene(shape="triangle", color="red", size="small",
                                                                      position="left"), seed), emb))
    assert np.mean(d_colour) < np.mean(d_shape)
