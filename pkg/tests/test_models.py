import numpy as np
import pytest

from vltower import tensor as T
from vltower.engine import save_checkpoint
from vltower.models import (
    FREEZE_GRID,
    CheckpointSource,
    ConfigError,
    FreezeSpec,
    InitSource,
    UnimodalModel,
    apply_freeze,
    build,
    closed_form_counts,
    format_param_report,
    param_report,
)
from vltower.tensor import ShapeError

from conftest import small_towers_config, tiny_config, walk_count

TEXT_REMAP = {"text_embedding.": "text_embedding.", "encoder.": "encoder."}


def batch(cfg, b=2, n=6, seed=0, pad_from=None):
    rng = np.random.default_rng(seed)
    ids = rng.integers(5, cfg.vocab_size, size=(b, n))
    ids[:, 0] = 1
    mask = np.ones((b, n), bool)
    if pad_from is not None:
        ids[0, pad_from:] = 0
        mask[0, pad_from:] = False
    images = rng.normal(size=(b, cfg.image_height, cfg.image_width, 3)).astype(np.float32)
    return ids, mask, images


@pytest.fixture(scope="module")
def small_towers():
    return build(small_towers_config())


class TestBuild:
    @pytest.mark.parametrize("kind", ["one_tower", "two_tower"])
    def test_same_seed_is_bit_identical(self, kind):
        a, b = build(tiny_config(kind)), build(tiny_config(kind))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a, b = build(tiny_config()), build(tiny_config(), rng_seed=5)
        assert not np.array_equal(a.text_encoder.block0.attn.wq.data, b.text_encoder.block0.attn.wq.data)

    def test_one_tower_init_from_text_checkpoint(self, tmp_path):
        cfg = tiny_config("one_tower")
        src = UnimodalModel("text", cfg, cfg.vocab_size, cfg.initializer(99))
        path = tmp_path / "text.ckpt"
        save_checkpoint(src, path)
        model = build(cfg, InitSource([CheckpointSource(str(path), TEXT_REMAP)]))
        source = dict(src.named_parameters())
        for name, p in model.named_parameters():
            if name.startswith(("text_embedding.", "encoder.")):
                np.testing.assert_array_equal(p.data, source[name].data)
        fresh = build(cfg)
        np.testing.assert_array_equal(model.vision_embedding.proj.weight.data, fresh.vision_embedding.proj.weight.data)
        assert "vision_embedding.proj.weight" in model.init_report["random"]
        assert "encoder.block0.attn.wq" in model.init_report["mapped"]

    def test_checkpoint_shape_mismatch_names_parameter(self, tmp_path):
        small = tiny_config("one_tower", d=16)
        src = UnimodalModel("text", small, 40, small.initializer(0))
        save_checkpoint(src, tmp_path / "s.ckpt")
        with pytest.raises(ShapeError, match=r"text_embedding.token_table.*\(40, 8\).*\(40, 16\)"):
            build(tiny_config("one_tower", d=8), InitSource([CheckpointSource(str(tmp_path / "s.ckpt"), TEXT_REMAP)]))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            build(tiny_config(d=10, heads=4))
        with pytest.raises(ConfigError):
            build(tiny_config(model_type="three_tower"))

    @pytest.mark.parametrize("kind", ["one_tower", "two_tower"])
    def test_names_are_a_bijection(self, kind):
        model = build(tiny_config(kind))
        named = list(model.named_parameters())
        names = [n for n, _ in named]
        assert len(set(names)) == len(names)
        assert len({id(p) for _, p in named}) == len(named)
        assert sum(p.size for _, p in named) == walk_count(model)

    def test_hierarchical_names(self, small_towers):
        names = dict(small_towers.named_parameters())
        assert "text_encoder.block3.ffn.w1" in names
        assert "cross_modal.stack.block5.vision.cross_attn.wk" in names


class TestForward:
    def test_one_tower_sequence_length(self):
        cfg = tiny_config("one_tower", d=16)
        cfg.image_height = cfg.image_width = 32
        model = build(cfg)
        ids, mask, images = batch(cfg, n=7)
        out = model.forward(ids, mask, images)
        assert out.sequence.shape == (2, 7 + 17, 16)
        assert out.pooled.shape == (2, 16)

    def test_small_towers_pooled_shape(self, small_towers):
        ids, mask, images = batch(small_towers.config, n=6)
        out = small_towers.forward(ids, mask, images)
        assert out.pooled.shape == (2, 512)
        assert out.text_states.shape == (2, 6, 256)
        assert out.image_states.shape == (2, 17, 256)

    @pytest.mark.parametrize("kind", ["one_tower", "two_tower"])
    def test_padded_positions_do_not_influence_outputs(self, kind):
        model = build(tiny_config(kind, init_std=0.2))
        ids, mask, images = batch(model.config, n=8, pad_from=5)
        a = model.forward(ids, mask, images)
        ids2 = ids.copy()
        ids2[0, 5:] = [7, 9, 11]
        b = model.forward(ids2, mask, images)
        np.testing.assert_array_equal(a.pooled.data, b.pooled.data)
        np.testing.assert_array_equal(a.text_states.data[:, :5], b.text_states.data[:, :5])
        np.testing.assert_array_equal(a.image_states.data, b.image_states.data)

    def test_one_tower_modality_only_via_embeddings(self):
        model = build(tiny_config("one_tower", init_std=0.2))
        model.text_embedding.token_type_table.data[:] = 0.0
        ids, mask, images = batch(model.config, b=1, n=4)
        text = model.text_embedding(ids).data
        image = model.vision_embedding(images).data
        # put the same content vector at a text slot and an image slot
        image[0, 3] = text[0, 2]
        seq = T.Tensor(np.concatenate([text, image], axis=1))
        out = model.encoder(seq, np.ones((1, seq.shape[1]), bool)).data
        np.testing.assert_allclose(out[0, 2], out[0, 4 + 3], rtol=0, atol=1e-6)


class TestFreeze:
    def test_grid_has_four_rows(self):
        assert [(t, v) for t, v, _ in FREEZE_GRID] == [
            ("Unfrozen", "Unfrozen"),
            ("Frozen", "Unfrozen"),
            ("Unfrozen", "Frozen"),
            ("Frozen", "Frozen"),
        ]

    def test_frozen_towers_trainable_count_matches_walk(self, small_towers):
        apply_freeze(small_towers, FreezeSpec(text_encoder=True, vision_encoder=True))
        try:
            trainable_walk = walk_count(small_towers.cross_modal)
            assert param_report(small_towers)["all"]["trainable"] == walk_count(small_towers, trainable_only=True) == trainable_walk
            frozen = {n for n, p in small_towers.named_parameters() if not p.requires_grad}
            assert all(n.split(".")[0] in ("text_embedding", "text_encoder", "vision_embedding", "vision_encoder") for n in frozen)
        finally:
            apply_freeze(small_towers, FreezeSpec())

    def test_embedding_flag_overrides_default(self):
        model = build(tiny_config())
        apply_freeze(model, FreezeSpec(text_encoder=True, text_embedding=False))
        assert model.text_embedding.token_table.requires_grad
        assert not model.text_encoder.block0.attn.wq.requires_grad

    def test_freeze_everything_leaves_nothing_trainable(self):
        for kind in ("one_tower", "two_tower"):
            model = build(tiny_config(kind))
            apply_freeze(model, FreezeSpec.everything())
            assert param_report(model)["all"]["trainable"] == 0

    def test_no_freeze_everything_trainable(self, small_towers):
        r = param_report(small_towers)
        assert r["all"]["trainable"] == r["all"]["total"] == walk_count(small_towers)

    def test_gradient_flows_through_frozen_encoder(self):
        model = build(tiny_config(init_std=0.2))
        apply_freeze(model, FreezeSpec(text_encoder=True, text_embedding=False))
        ids, mask, images = batch(model.config)
        with T.Tape():
            T.backward(T.sum_(model.forward(ids, mask, images).pooled))
        assert model.text_encoder.block0.attn.wq.grad is None
        assert np.abs(model.text_embedding.token_table.grad).sum() > 0


class TestAccounting:
    def test_small_towers_closed_forms(self, small_towers):
        cfg = small_towers.config
        V, L = cfg.vocab_size, cfg.max_text_len

        def block(d, i):
            return 4 * d * d + 4 * d + 2 * d * i + d + i + 4 * d

        def stream(d, i):
            return 2 * (4 * d * d + 4 * d) + 2 * d * i + d + i + 6 * d

        expected = {
            "text_embedding": (V + L + 2) * 128 + 2 * 128 + 128 * 256 + 256,
            "text_encoder": 12 * block(256, 1024),
            "vision_embedding": 192 * 192 + 192 + 192 + 17 * 192 + 2 * 192,
            "vision_encoder": 12 * block(192, 768),
            "cross_modal": 257 * 256 + 193 * 256 + 6 * 2 * stream(256, 1024) + 2 * (256 * 256 + 256),
        }
        report = param_report(small_towers)
        walks = {g: walk_count(getattr(small_towers, g)) for g in expected}
        for g, n in expected.items():
            assert report[g]["total"] == n == walks[g] == closed_form_counts(cfg)[g], g

    @pytest.mark.parametrize("kind", ["one_tower", "two_tower"])
    def test_closed_form_matches_walk(self, kind):
        model = build(tiny_config(kind, d=24, heads=3, layers=2, cross_layers=2))
        cf = closed_form_counts(model.config)
        rep = param_report(model)
        assert {g: rep[g]["total"] for g in cf} == cf
        assert sum(cf.values()) == walk_count(model)

    def test_report_table_renders(self, small_towers):
        text = format_param_report(param_report(small_towers))
        assert text.splitlines()[0].split() == ["module", "total", "trainable", "fraction"]
        assert "cross_modal" in text and "1.0000" in text
