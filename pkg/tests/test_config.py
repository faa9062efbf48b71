import pytest

from leafsynth._util import derive_seed
from leafsynth.config import ConfigError, env_overrides, load_config


def _write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_empty_file_gives_reference_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, ""), environ={})
    assert cfg.vae.beta == 75.0 and cfg.vae.latent_dim == 32
    assert cfg.vae.learning_rate == 0.001 and cfg.vae.epochs == 2000 and cfg.vae.batch_size == 64
    assert cfg.translator.lambda_l1 == 100.0 and cfg.translator.learning_rate == 0.0002
    assert cfg.translator.steps == 12000 and cfg.translator.batch_size == 1
    assert cfg.dataset.size == 256 and cfg.dataset.augment_factor == 3


def test_beta_zero_accepted(tmp_path):
    assert load_config(_write(tmp_path, "[vae]\nbeta = 0\n"), environ={}).vae.beta == 0.0


def test_misspelled_key_named(tmp_path):
    with pytest.raises(ConfigError, match=r"vae\.betta"):
        load_config(_write(tmp_path, "[vae]\nbetta = 3\n"), environ={})
    with pytest.raises(ConfigError, match="vea"):
        load_config(_write(tmp_path, "[vea]\nbeta = 3\n"), environ={})


def test_invariant_violation_names_section(tmp_path):
    with pytest.raises(ConfigError, match="vae: beta"):
        load_config(_write(tmp_path, "[vae]\nbeta = -1\n"), environ={})
    with pytest.raises(ConfigError, match="dataset.size"):
        load_config(_write(tmp_path, '[dataset]\nsize = "big"\n'), environ={})


def test_parse_error(tmp_path):
    with pytest.raises(ConfigError, match="parse"):
        load_config(_write(tmp_path, "[vae\nbeta=1"), environ={})


def test_precedence(tmp_path):
    path = _write(tmp_path, "[vae]\nbeta = 10\nepochs = 5\n[translator]\nsteps = 7\n")
    cfg = load_config(path, ["vae.beta=20"], environ={"L2L_VAE_BETA": "15", "L2L_TRANSLATOR_STEPS": "9"})
    assert cfg.vae.beta == 20.0  # CLI over env over file
    assert cfg.translator.steps == 9  # env over file
    assert cfg.vae.epochs == 5  # file over default


def test_env_mapping():
    assert env_overrides({"L2L_VAE_LATENT_DIM": "8", "HOME": "/"}) == [("vae.latent_dim", "8")]
    with pytest.raises(ConfigError, match="vae.nope"):
        load_config(None, environ={"L2L_VAE_NOPE": "1"})


def test_stage_seeds_derived_from_root():
    a = load_config(None, ["seed=5"], environ={})
    assert a.vae.seed == derive_seed(5, "vae") and a.translator.seed == derive_seed(5, "translator")
    assert len({a.vae.seed, a.translator.seed, a.eval.seed, a.dataset.seed, a.generate.seed}) == 5
    b = load_config(None, ["seed=5", "vae.seed=3"], environ={})
    assert b.vae.seed == 3 and b.translator.seed == a.translator.seed


def test_value_types():
    cfg = load_config(None, ["translator.adam_betas=0.4,0.9", "generate.refine=false", "translator.num_downs=none"],
                      environ={})
    assert cfg.translator.adam_betas == (0.4, 0.9)
    assert cfg.generate.refine is False and cfg.translator.num_downs is None
    with pytest.raises(ConfigError):
        load_config(None, ["generate.refine=maybe"], environ={})
    with pytest.raises(ConfigError):
        load_config(None, ["vae.epochs=1.5"], environ={})
    with pytest.raises(ConfigError):
        load_config(None, ["novalue"], environ={})


def test_snapshot_round_trips_through_toml(tmp_path):
    cfg = load_config(None, ["seed=2", "vae.beta=1"], environ={})
    lines = [f"seed = {cfg.seed}"]
    for section, values in cfg.to_dict().items():
        if section == "seed":
            continue
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is None:
                continue
            lines.append(f"{k} = " + (str(v).lower() if isinstance(v, bool) else repr(v).replace("'", '"')))
    again = load_config(_write(tmp_path, "\n".join(lines) + "\n"), environ={})
    assert again == cfg
