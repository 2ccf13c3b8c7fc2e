import pytest

from lgvq.config import ConfigError, TrainConfig, from_mapping, load_config, parse_lines


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.commitment, cfg.alpha, cfg.beta, cfg.gamma) == (0.25, 0.1, 0.1, 0.1)
    assert (cfg.mask_mean, cfg.mask_std, cfg.mask_low, cfg.mask_high) == (0.55, 0.25, 0.5, 1.0)
    assert cfg.max_pairs == 32 and cfg.batch_size == 8 and cfg.lr == 2e-4
    assert cfg.grid_size == 8


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nsteps = 10\n\nalpha=0.5\nuse_ras = false\n")
    cfg = load_config(path, ["steps=12", "seed = 3"])
    assert (cfg.steps, cfg.alpha, cfg.use_ras, cfg.seed) == (12, 0.5, False, 3)


def test_resolved_text_round_trips(tmp_path):
    cfg = TrainConfig().replace(lr=1e-3, gamma=0.0, manifest="/data/m.jsonl", gsa_symmetric=True)
    cfg.save(tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as info:
        load_config(None, ["bogus=1", "steps=ten", "alpha=-1", "factor=3", "use_gsa=maybe"])
    text = "\n".join(info.value.problems)
    for word in ("bogus", "steps"):
        assert word in text
    assert len(info.value.problems) == 3
    # value errors found after parsing are also collected in one go
    with pytest.raises(ConfigError) as info:
        load_config(None, ["alpha=-1", "factor=3", "mask_low=0.9", "mask_high=0.8"])
    assert len(info.value.problems) == 3


def test_malformed_lines():
    with pytest.raises(ConfigError) as info:
        parse_lines(["steps 10", "=3", "ok = 1"], "x.cfg")
    assert [p.split(":")[1] for p in info.value.problems] == ["1", "2"]


@pytest.mark.parametrize(
    "key, value",
    [("image_size", "60"), ("codebook_size", "1"), ("vt_heads", "5"), ("text_encoder", "bert"), ("mask_std", "0")],
)
def test_invalid_values(key, value):
    with pytest.raises(ConfigError, match=key.split("_")[0]):
        from_mapping({key: value})


def test_activity_flags():
    cfg = TrainConfig().replace(alpha=0.0, use_mtp=False)
    assert not cfg.gsa_active() and not cfg.mtp_active() and cfg.ras_active()
