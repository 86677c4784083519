import json

import numpy as np
import pytest

from detloss.cli import MANIFEST_PREFIX, main, read_detections


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return str(path)


def planted_boxes(path):
    rng = np.random.default_rng(11)
    a = np.array([10.0, 10.0]) + rng.uniform(-1, 1, (50, 2))
    b = np.array([100.0, 80.0]) + rng.uniform(-5, 5, (50, 2))
    recs = [{"cx": 0.0, "cy": 0.0, "w": float(w), "h": float(h)} for w, h in np.vstack([a, b])]
    return write_jsonl(path, recs)


def chain_dets(path):
    return write_jsonl(path, [
        {"cx": 0.0, "cy": 0.0, "w": 10.0, "h": 10.0, "score": 0.9, "image_id": "a"},
        {"cx": 2.5, "cy": 0.0, "w": 10.0, "h": 10.0, "score": 0.8, "image_id": "a"},
        {"cx": 5.0, "cy": 0.0, "w": 10.0, "h": 10.0, "score": 0.7, "image_id": "a"},
    ])


def single_gt(tmp_path):
    dets = write_jsonl(tmp_path / "dets.jsonl", [{"cx": 7.5, "cy": 5.0, "w": 10.0, "h": 10.0, "score": 0.9}])
    gts = write_jsonl(tmp_path / "gts.jsonl", [{"cx": 5.0, "cy": 5.0, "w": 10.0, "h": 10.0}])
    return dets, gts


def run(capsys, *args):
    code = main(list(args))
    out, err = capsys.readouterr()
    return code, out, err


def body(text):
    lines = text.splitlines()
    assert lines[0].startswith(MANIFEST_PREFIX)
    return lines[1:]


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


class TestSweep:
    def test_full_grid(self, capsys):
        code, out, _ = run(capsys, "sweep", "--a", "1", "--dr", "0.1", "--steps", "360")
        lines = body(out)
        assert code == 0 and lines[0] == "theta_deg,r_diou"
        rows = [l for l in lines[1:] if not l.startswith(("argmin", "#"))]
        assert len(rows) == 360
        assert "argmin,225.0" in lines
        assert lines[-1] == "# published_argmin_deg=157.0 matches_published=false"
        assert float(rows[180].split(",")[1]) == pytest.approx(0.237845, abs=1e-6)

    def test_four_steps(self, capsys):
        code, out, _ = run(capsys, "sweep", "--steps", "4")
        rows = body(out)[1:5]
        assert code == 0
        assert [r.split(",")[0] for r in rows] == ["0.0", "90.0", "180.0", "270.0"]

    @pytest.mark.parametrize("args", [["--a", "-1"], ["--dr", "0"], ["--steps", "0"], ["--a", "x"]])
    def test_bad_flags(self, capsys, args):
        code, out, err = run(capsys, "sweep", *args)
        assert code == 1 and out == "" and "Error" in err


class TestGradcheck:
    def test_miou(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--kind", "miou", "--n", "1000", "--seed", "7")
        (row,) = body(out)[1:]
        kind, n, err, tol, passed = row.split(",")
        assert code == 0 and kind == "miou" and n == "1000" and float(err) <= 1e-5 and passed == "true"

    def test_single_sample(self, capsys):
        code, _, _ = run(capsys, "gradcheck", "--n", "1")
        assert code == 0

    def test_unattainable_tolerance(self, capsys):
        code, out, err = run(capsys, "gradcheck", "--n", "50", "--tol", "1e-20")
        assert code == 2 and "false" in out and "tolerance" in err

    def test_unknown_kind(self, capsys):
        code, _, _ = run(capsys, "gradcheck", "--kind", "ciou")
        assert code == 1


class TestFileCommands:
    def test_cluster(self, capsys, tmp_path):
        path = planted_boxes(tmp_path / "boxes.jsonl")
        code, out, _ = run(capsys, "cluster", "--k", "2", "--seed", "3", path)
        lines = body(out)
        assert code == 0 and lines[0] == "w,h,members"
        got = np.array([[float(v) for v in l.split(",")[:2]] for l in lines[1:]])
        assert np.max(np.abs(got - [[10, 10], [100, 80]])) <= 2.0

    def test_nms_chain(self, capsys, tmp_path):
        path = chain_dets(tmp_path / "dets.jsonl")
        code, out, _ = run(capsys, "nms", "--iou", "0.5", path)
        kept = [json.loads(l) for l in body(out)]
        assert code == 0 and [d["cx"] for d in kept] == [0.0, 5.0]

    def test_nms_roundtrip(self, capsys, tmp_path):
        path = chain_dets(tmp_path / "dets.jsonl")
        run(capsys, "nms", "--iou", "0.9", path, "--out", "kept.jsonl")
        text = (tmp_path / "kept.jsonl").read_text()
        (tmp_path / "plain.jsonl").write_text("".join(l + "\n" for l in body(text)))
        assert read_detections(str(tmp_path / "plain.jsonl")) == read_detections(path)

    def test_eval_single_gt(self, capsys, tmp_path):
        dets, gts = single_gt(tmp_path)
        code, out, _ = run(capsys, "eval", dets, gts)
        rep = json.loads("\n".join(body(out)))
        assert code == 0
        assert rep["ap"] == pytest.approx(0.3, abs=1e-15) and rep["ap75"] == 0.0 and rep["ap50"] == 1.0

    @pytest.mark.parametrize("line,field", [
        ('{"cx": 1, "cy": 2, "w": 3}', "h"),
        ('{"cx": 1, "cy": 2, "w": -3, "h": 1}', "w"),
        ('{"cx": "a", "cy": 2, "w": 3, "h": 1}', "cx"),
        ('{"cx": 1, "cy": 2, "w": 3, "h": 1, "score": 2}', "score"),
        ('{"cx": 1, "cy": 2,', "<json>"),
    ])
    def test_parse_errors_name_file_line_field(self, capsys, tmp_path, line, field):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"cx": 0, "cy": 0, "w": 1, "h": 1, "score": 0.5}\n' + line + "\n")
        code, out, err = run(capsys, "nms", str(p))
        assert code == 1 and out == ""
        assert f"bad.jsonl:2: field '{field}'" in err

    def test_failed_parse_leaves_no_output(self, capsys, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("not json\n")
        code, _, _ = run(capsys, "nms", str(p), "--out", "result.jsonl")
        assert code == 1
        assert sorted(x.name for x in tmp_path.iterdir()) == ["bad.jsonl"]

    def test_missing_file(self, capsys):
        code, _, _ = run(capsys, "eval", "nope.jsonl", "nope2.jsonl")
        assert code == 1


class TestExperiments:
    def test_converge_small(self, capsys):
        code, out, _ = run(capsys, "converge", "--kind", "miou", "--max-steps", "50")
        lines = body(out)
        assert code == 0 and lines[0].startswith("kind,cx,cy,w,h")
        assert len([l for l in lines[1:] if not l.startswith("#")]) == 225
        summary = json.loads(lines[-1][len("# summary "):])
        assert summary["miou"]["runs"] == 225

    def test_toy(self, capsys):
        code, out, _ = run(capsys, "toy", "--epochs", "3", "--coeff-mode", "neg")
        rep = json.loads("\n".join(body(out)))
        assert code == 0 and rep["epochs"] == 3 and len(rep["loss_history"]) == 3

    def test_coeff(self, capsys):
        code, out, _ = run(capsys, "coeff", "--gamma", "2", "--steps", "5")
        lines = body(out)
        assert code == 0 and lines[0] == "iou,gamma,positive,negative,negative_as_printed"
        row = {float(l.split(",")[0]): l.split(",") for l in lines[1:]}
        assert float(row[0.0][3]) == 1.0
        assert float(row[0.8][3]) == pytest.approx(0.04, abs=1e-15)


class TestManifestAndReplay:
    def test_manifest_fields(self, capsys, tmp_path):
        dets, gts = single_gt(tmp_path)
        run(capsys, "eval", dets, gts, "--out", "ap.json")
        first = (tmp_path / "ap.json").read_text().splitlines()[0]
        m = json.loads(first[len(MANIFEST_PREFIX):])
        assert m["command"] == "eval" and m["outputs"] == ["ap.json"]
        assert set(m["inputs"]) == {"dets", "gts"} and len(m["inputs"]["dets"]["sha256"]) == 64
        assert m["version"]

    def test_replay_identical(self, capsys, tmp_path):
        run(capsys, "toy", "--epochs", "2", "--out", "toy.json")
        code, out, _ = run(capsys, "replay", "toy.json", "--check")
        assert code == 0 and out == (tmp_path / "toy.json").read_text()

    def test_replay_detects_edit(self, capsys, tmp_path):
        run(capsys, "coeff", "--steps", "2", "--out", "c.csv")
        p = tmp_path / "c.csv"
        p.write_text(p.read_text().replace("0.75", "0.76"))
        code, _, err = run(capsys, "replay", "c.csv", "--check")
        assert code == 1 and "differs" in err

    def test_replay_detects_changed_input(self, capsys, tmp_path):
        path = chain_dets(tmp_path / "dets.jsonl")
        run(capsys, "nms", path, "--out", "kept.jsonl")
        with open(path, "a") as fh:
            fh.write('{"cx": 50, "cy": 0, "w": 1, "h": 1, "score": 0.1}\n')
        code, _, err = run(capsys, "replay", "kept.jsonl")
        assert code == 1 and "changed" in err

    def test_replay_without_manifest(self, capsys, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n")
        code, _, _ = run(capsys, "replay", "x.csv")
        assert code == 1

    def test_lf_line_endings(self, capsys, tmp_path):
        run(capsys, "sweep", "--steps", "8", "--out", "s.csv")
        assert b"\r" not in (tmp_path / "s.csv").read_bytes()
