import json
from pathlib import Path

import numpy as np
import pytest

from layoutedit.cli import main
from layoutedit.config import RunConfig
from layoutedit.qlt import load_qlt


def small_config_file(tmp_path, **kw):
    base = dict(seed=3, d_i=16, d_t=16, d_l=16, d_model=16, heads=2,
                max_n=8, image_size=16, patch_size=8, sample_steps=2,
                t_train=50, train_steps=4,
                data_dir=str(tmp_path / "data"),
                checkpoint_dir=str(tmp_path / "ckpt"))
    base.update(kw)
    path = tmp_path / "config.json"
    RunConfig(**base).save(path)
    return str(path)


def run_synth(tmp_path, cfg=None):
    cfg = cfg or small_config_file(tmp_path)
    assert main(["synth", "--config", cfg, "--counts", "1-3"]) == 0
    return cfg


class TestSynth:
    def test_writes_scenes(self, tmp_path, capsys):
        run_synth(tmp_path)
        assert (tmp_path / "data" / "scene_002.qlt").exists()
        assert "3 scenes" in capsys.readouterr().out

    def test_bad_count_exit_code(self, tmp_path, capsys):
        cfg = small_config_file(tmp_path)
        assert main(["synth", "--config", cfg, "--counts", "11"]) == 1
        assert "count" in capsys.readouterr().err

    def test_count_list_spec(self, tmp_path):
        cfg = small_config_file(tmp_path)
        assert main(["synth", "--config", cfg, "--counts", "2,5"]) == 0
        index = json.loads((tmp_path / "data" / "index.json").read_text())
        assert len(index["scenes"]) == 2

    def test_ql_seed_env_changes_output(self, tmp_path, monkeypatch):
        cfg = small_config_file(tmp_path)
        run_synth(tmp_path, cfg)
        base = (tmp_path / "data" / "scene_000.qlt").read_bytes()
        monkeypatch.setenv("QL_SEED", "99")
        run_synth(tmp_path, cfg)
        assert (tmp_path / "data" / "scene_000.qlt").read_bytes() != base


class TestTrainAndEdit:
    def test_train_then_edit(self, tmp_path, capsys):
        cfg = run_synth(tmp_path)
        assert main(["train", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "ip init: random" in out
        assert (tmp_path / "ckpt" / "manifest.json").exists()
        assert (tmp_path / "ckpt" / "loss_log.jsonl").exists()

        out_base = tmp_path / "edited" / "result"
        rc = main(["edit", "--config", cfg,
                   "--image", str(tmp_path / "data" / "scene_001.ppm"),
                   "--layout", str(tmp_path / "data" / "scene_001.json"),
                   "--prompt", "two circles",
                   "--out", str(out_base)])
        assert rc == 0
        img = load_qlt(out_base.with_suffix(".qlt"))
        assert img.shape == (3, 16, 16)
        assert out_base.with_suffix(".ppm").exists()

    def test_edit_without_checkpoint_fails(self, tmp_path, capsys):
        cfg = run_synth(tmp_path)
        rc = main(["edit", "--config", cfg,
                   "--image", str(tmp_path / "data" / "scene_000.ppm"),
                   "--layout", str(tmp_path / "data" / "scene_000.json"),
                   "--out", str(tmp_path / "x")])
        assert rc == 1


class TestEval:
    def write_gt(self, gt_dir, name, boxes):
        gt_dir.mkdir(parents=True, exist_ok=True)
        doc = {"image": f"{name}.qlt", "width": 16, "height": 16,
               "category": "circle", "count": len(boxes),
               "boxes": [list(b) for b in boxes]}
        (gt_dir / f"{name}.json").write_text(json.dumps(doc))

    def write_pred(self, pred_dir, name, boxes, scores):
        pred_dir.mkdir(parents=True, exist_ok=True)
        doc = {"image": f"{name}.qlt",
               "detections": [{"box": list(b), "score": s}
                              for b, s in zip(boxes, scores)]}
        (pred_dir / f"{name}.json").write_text(json.dumps(doc))

    def test_oracle_predictions_score_perfectly(self, tmp_path, capsys):
        boxes = [(0.1, 0.1, 0.4, 0.4), (0.5, 0.5, 0.9, 0.9)]
        self.write_gt(tmp_path / "gt", "a", boxes)
        self.write_pred(tmp_path / "pred", "a", boxes, [0.9, 0.8])
        out = tmp_path / "report.json"
        rc = main(["eval", "--pred-dir", str(tmp_path / "pred"),
                   "--gt-dir", str(tmp_path / "gt"), "--out", str(out)])
        assert rc == 0
        rep = json.loads(out.read_text())
        assert rep["OA"] == 1.0 and rep["AP"] == 1.0

    def test_missing_prediction_counts_as_empty(self, tmp_path):
        self.write_gt(tmp_path / "gt", "a", [(0.1, 0.1, 0.4, 0.4)])
        (tmp_path / "pred").mkdir()
        out = tmp_path / "report.json"
        rc = main(["eval", "--pred-dir", str(tmp_path / "pred"),
                   "--gt-dir", str(tmp_path / "gt"), "--out", str(out)])
        assert rc == 0
        rep = json.loads(out.read_text())
        assert rep["OA"] == 0.0 and rep["AP"] == 0.0
        assert rep["per_image"][0]["fn"] == 1

    def test_stray_prediction_rejected(self, tmp_path, capsys):
        self.write_gt(tmp_path / "gt", "a", [(0.1, 0.1, 0.4, 0.4)])
        self.write_pred(tmp_path / "pred", "b", [(0.1, 0.1, 0.4, 0.4)], [0.9])
        rc = main(["eval", "--pred-dir", str(tmp_path / "pred"),
                   "--gt-dir", str(tmp_path / "gt")])
        assert rc == 1
        assert "b.json" in capsys.readouterr().err

    def test_empty_gt_dir_rejected(self, tmp_path):
        (tmp_path / "gt").mkdir()
        (tmp_path / "pred").mkdir()
        rc = main(["eval", "--pred-dir", str(tmp_path / "pred"),
                   "--gt-dir", str(tmp_path / "gt")])
        assert rc == 1


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--entries", "2"]) == 0
        out = capsys.readouterr().out
        assert "0 failed" in out
        assert "FAIL" not in out

    def test_corrupt_hook_fails(self, capsys):
        rc = main(["gradcheck", "--entries", "2",
                   "--corrupt", "ilfm.w_qi"])
        assert rc == 2
        assert "FAIL" in capsys.readouterr().out


class TestDumpAttention:
    def test_exports_both_branches(self, tmp_path, capsys):
        cfg = run_synth(tmp_path)
        out_dir = tmp_path / "attn"
        rc = main(["dump-attn", "--config", cfg,
                   "--image", str(tmp_path / "data" / "scene_000.ppm"),
                   "--layout", str(tmp_path / "data" / "scene_000.json"),
                   "--site", "down4", "--out", str(out_dir)])
        assert rc == 0
        text = load_qlt(out_dir / "down4_text.qlt")
        adapter = load_qlt(out_dir / "down4_adapter.qlt")
        # 2 heads, 64 latent tokens; 1 prompt token and 1 adapter token
        assert text.shape == (2, 64, 1)
        assert adapter.shape == (2, 64, 1)
        np.testing.assert_allclose(text.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(adapter.sum(axis=-1), 1.0, atol=1e-6)

    def test_unknown_site(self, tmp_path, capsys):
        cfg = run_synth(tmp_path)
        rc = main(["dump-attn", "--config", cfg,
                   "--image", str(tmp_path / "data" / "scene_000.ppm"),
                   "--layout", str(tmp_path / "data" / "scene_000.json"),
                   "--site", "down9", "--out", str(tmp_path / "attn")])
        assert rc == 1
        assert "down9" in capsys.readouterr().err
