import argparse
import json

import pytest
import yaml

from rkdsc.cli import main, parse_snr_grid
from rkdsc.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, parse_config, replace_path
from rkdsc.kdl_darts import DiscreteArchitecture

TINY = """\
preset: toy
seed: 0
data:
  source: synthetic
  num_classes: 3
  samples_per_class: 20
  input_shape: [3, 6, 6]
search_space:
  width: 8
  num_layers: 2
  depths: [1, 2]
  feature_dim: 16
cat:
  embed_dim: 16
  num_heads: 2
  ffn_hidden: 24
teacher:
  width: 8
  depth: 1
  pretrain_epochs: 1
search:
  epochs: 1
  batch_size: 16
plan:
  stage1: {epochs: 1, batch_size: 16}
  stage2: {epochs: 1, batch_size: 16}
eval:
  snrs: [0, 10]
  trials: 1
  head_epochs: 1
  ablation_ratios: [0.5, 0.25]
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestConfig:
    def test_minimal_defaults(self, tmp_path):
        cfg = parse_config(write(tmp_path, "data:\n  source: synthetic\n"))
        assert cfg.search.lambda_J == 0.05
        assert cfg.search_space.t_alpha == 1.0 and cfg.search_space.t_beta == 2.0
        assert cfg.plan.stage2.snr_range == (5.0, 20.0)
        assert cfg.eval.snrs == (-10, -5, 0, 5, 10, 15, 20, 25)
        assert cfg.digest() == parse_config(write(tmp_path, "data:\n  source: synthetic\n", "d.yaml")).digest()

    def test_empty_file(self, tmp_path):
        assert isinstance(parse_config(write(tmp_path, "")), ExperimentConfig)

    def test_dimension_mismatch_names_both_fields(self, tmp_path):
        text = "search_space:\n  feature_dim: 256\ncat:\n  embed_dim: 512\n  num_heads: 8\n"
        with pytest.raises(ConfigError) as info:
            parse_config(write(tmp_path, text))
        msg = str(info.value)
        assert "cat.embed_dim (512)" in msg and "search_space.feature_dim (256)" in msg

    def test_unknown_key_reports_line(self, tmp_path):
        text = "data:\n  source: synthetic\nsearch:\n  epochs: 2\n  lamda_J: 0.1\n"
        with pytest.raises(ConfigError, match=r"line 5: unknown key 'search.lamda_J'"):
            parse_config(write(tmp_path, text))

    def test_unknown_top_level(self, tmp_path):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config(write(tmp_path, "seed: 1\noptimizer: adam\n"))

    def test_bad_value(self, tmp_path):
        with pytest.raises(ConfigError, match="search"):
            parse_config(write(tmp_path, "search:\n  approx_mode: magic\n"))

    def test_malformed_yaml(self, tmp_path):
        with pytest.raises(ConfigError, match="line"):
            parse_config(write(tmp_path, "data: [unclosed\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.yaml")

    def test_presets(self):
        assert config_from_dict({"preset": "cifar10-like"}).cat.compressed_dim == 6
        assert config_from_dict({"preset": "cifar100-like"}).data.num_classes == 20
        with pytest.raises(ConfigError):
            config_from_dict({"preset": "imagenet"})

    def test_digest_ignores_out_dir(self):
        a = config_from_dict({"out_dir": "a"})
        b = config_from_dict({"out_dir": "b"})
        assert a.digest() == b.digest() and a.run_dir != b.run_dir
        assert config_from_dict({"seed": 1}).digest() != a.digest()

    def test_seed_propagates(self):
        cfg = config_from_dict({"seed": 7})
        assert cfg.search.seed == 7 and cfg.plan.seed == 7

    def test_replace_path(self):
        cfg = replace_path(config_from_dict({}), "cat.compression_ratio", 0.25)
        assert cfg.cat.compression_ratio == 0.25
        with pytest.raises(ConfigError):
            replace_path(config_from_dict({}), "cat.compression_ratio", 1.5)

    def test_dump_roundtrip(self, tiny):
        cfg = parse_config(tiny)
        again = config_from_dict(yaml.safe_load(dump_config(cfg)))
        assert again.digest() == cfg.digest()

    def test_shipped_config_parses(self):
        from pathlib import Path
        for p in sorted((Path(__file__).parents[1] / "configs").glob("*.yaml")):
            parse_config(p)


class TestSnrGrid:
    def test_inclusive(self):
        assert parse_snr_grid("-10:25:5") == (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0)

    def test_single(self):
        assert parse_snr_grid("3") == (3.0,)

    @pytest.mark.parametrize("bad", ["a:b:c", "0:10", "10:0:5", "0:10:0"])
    def test_bad(self, bad):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_snr_grid(bad)


class TestCli:
    def test_invalid_config_exit_1(self, tmp_path, capsys):
        p = write(tmp_path, "search:\n  bogus: 1\n")
        assert main(["search", "--config", str(p), "--out-dir", str(tmp_path / "runs")]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_missing_artifact_exit_1(self, tiny, tmp_path, capsys):
        assert main(["eval", "--config", str(tiny), "--out-dir", str(tmp_path / "runs")]) == 1
        err = capsys.readouterr().err
        assert "architecture.json" in err or "stage" in err

    def test_bad_ratio_override(self, tiny, tmp_path):
        assert main(["search", "--config", str(tiny), "--ratio", "1.2", "--out-dir", str(tmp_path)]) == 1

    def test_search_artifacts(self, tiny, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["search", "--config", str(tiny), "--out-dir", str(out)]) == 0
        run_dir = out / parse_config(tiny).run_id
        assert capsys.readouterr().out.strip() == str(run_dir)
        arch = DiscreteArchitecture.load(run_dir / "architecture.json")
        assert len(arch.layers) == 2 and all(len(l) == 1 for l in arch.layers)
        assert arch.provenance["config_digest"] == parse_config(tiny).digest()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["commands"] == ["search"]
        assert "architecture.json" in manifest["artifacts"]
        assert (run_dir / "search_log.csv").read_text().startswith("epoch,val_loss")

    @pytest.mark.slow
    def test_full_chain_and_ablation(self, tiny, tmp_path):
        out = tmp_path / "runs"
        assert main(["all", "--config", str(tiny), "--out-dir", str(out)]) == 0
        run_dir = out / parse_config(tiny).run_id
        for name in ["stage1.pt", "stage2.pt", "results.csv", "baseline_results.csv", "params_flops.json",
                     "accuracy_vs_snr.png", "config.yaml"]:
            assert (run_dir / name).exists(), name
        lines = (run_dir / "results.csv").read_text().splitlines()
        assert [float(l.split(",")[0]) for l in lines[1:]] == [0.0, 10.0]
        assert main(["ablate", "--config", str(tiny), "--out-dir", str(out)]) == 0
        ab = (run_dir / "ablation.csv").read_text().splitlines()
        assert ab[1:] and [l.split(",")[2] for l in ab[1:]] == ["8", "12"]

    def test_snr_override_changes_run(self, tiny, tmp_path, capsys):
        assert main(["search", "--config", str(tiny), "--snr", "0:20:10", "--out-dir", str(tmp_path)]) == 0
        run_dir = capsys.readouterr().out.strip()
        assert run_dir.endswith(replace_path(parse_config(tiny), "eval.snrs", [0.0, 10.0, 20.0]).run_id)
