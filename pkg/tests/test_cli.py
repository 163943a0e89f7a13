import csv
import json

import pytest

from voxlabel.cli import build_parser, main
from voxlabel.scene import SceneSpec


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_grid_defaults(self):
        args = build_parser().parse_args(["grid", "run"])
        assert args.policies == "random,frontier"
        assert args.alphas == "0,0.1,0.7,1.0"
        assert args.workers == 1

    def test_bad_policy_rejected(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["pipeline", "run", "--policy", "greedy"])


class TestMain:
    def test_scene_gen(self, tmp_path, capsys):
        out = tmp_path / "scene.json"
        assert main(["scene", "gen", "--seed", "4", "--out", str(out)]) == 0
        scene = SceneSpec.load(out)
        assert scene.objects
        assert str(out) in capsys.readouterr().out

    def test_pipeline_run_smoke(self, tmp_path, capsys):
        rc = main(["pipeline", "run", "--steps", "3", "--seed", "0",
                   "--out", str(tmp_path)])
        assert rc == 0
        manifest = json.loads((tmp_path / "MANIFEST.json").read_text())
        assert manifest["status"] == "ok"
        assert "eval.csv" in manifest["files"]

    def test_out_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VOXLABEL_OUT", str(tmp_path / "envout"))
        assert main(["pipeline", "run", "--steps", "1"]) == 0
        assert (tmp_path / "envout" / "MANIFEST.json").exists()

    def test_config_file_with_override(self, tmp_path):
        from voxlabel.pipeline import RunConfig
        from voxlabel.serialize import canonical_dumps
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(canonical_dumps(RunConfig(steps=1).to_json()))
        out = tmp_path / "run"
        assert main(["pipeline", "run", "--config", str(cfg_path),
                     "--seed", "5", "--out", str(out)]) == 0
        saved = json.loads((out / "config.json").read_text())
        assert saved["seed"] == 5
        assert saved["steps"] == 1

    def test_grid_run_smoke(self, tmp_path):
        rc = main(["grid", "run", "--steps", "10", "--policies", "frontier",
                   "--alphas", "0.7", "--seeds", "0",
                   "--min-instance-voxels", "10", "--epochs", "1",
                   "--out", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "aggregate.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1
