import json

import numpy as np
import pytest
from PIL import Image

from kanjinet import cli
from kanjinet import data as D
from kanjinet.attribution import grid_size, read_pgm
from synthetic import blob_dataset


def to_bytes(ds):
    return np.rint(ds.images[:, 0] * 255).astype(np.uint8)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Raw MNIST-layout blobs ingested once; train/eval tests share the result."""
    root = tmp_path_factory.mktemp("cli")
    raw = root / "raw"
    raw.mkdir()
    for prefix, seed in (("train", 0), ("t10k", 1)):
        ds = blob_dataset(num_classes=3, per_class=12, seed=seed)
        (raw / f"{prefix}-images-idx3-ubyte").write_bytes(D.write_idx(to_bytes(ds)))
        (raw / f"{prefix}-labels-idx1-ubyte").write_bytes(D.write_idx(ds.labels.astype(np.uint8)))
    assert cli.main(["ingest", "--dataset", "mnist", "--raw", str(raw), "--out", str(root / "data")]) == 0
    return root


def train_args(ws, arch, *extra):
    return ["train", "--data", str(ws / "data" / "mnist"), "--arch", arch, "--epochs", "2",
            "--batch-size", "8", "--out", str(ws / "ckpt"), *extra]


@pytest.fixture(scope="module")
def members(workspace):
    for arch in ("cnn1", "cnn2"):
        assert cli.main(train_args(workspace, arch)) == 0
    assert cli.main(train_args(workspace, "cnn3-base", "--name", "base")) == 0
    assert cli.main(train_args(workspace, "cnn3", "--base", str(workspace / "ckpt" / "base.ckpt"),
                               "--freeze")) == 0
    return [workspace / "ckpt" / f"mnist_{a}.ckpt" for a in ("cnn1", "cnn2", "cnn3")]


class TestIngest:
    def test_manifest(self, workspace):
        out = workspace / "data" / "mnist"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["num_classes"] == 3 and manifest["train"]["samples"] == 36
        assert manifest["train_ratio"] == pytest.approx(0.5)
        assert set(manifest["checksums"]) == {"train.kfds", "test.kfds"}
        ds = D.load_cache(out / "train.kfds")
        assert ds.images.shape == (36, 1, 8, 8)

    def test_kkanji_tree(self, tmp_path):
        rng = np.random.default_rng(0)
        for name, n in (("u4e00", 10), ("u4e8c", 6), ("u4e09", 2)):
            (tmp_path / "raw" / name).mkdir(parents=True)
            for i in range(n):
                Image.fromarray(rng.integers(0, 256, (8, 8), dtype=np.uint8), "L").save(
                    tmp_path / "raw" / name / f"{i}.png")
        code = cli.main(["ingest", "--dataset", "kkanji", "--raw", str(tmp_path / "raw"),
                         "--top-classes", "2", "--out", str(tmp_path / "o")])
        assert code == 0
        manifest = json.loads((tmp_path / "o" / "kkanji" / "manifest.json").read_text())
        assert manifest["label_map"] == ["u4e00", "u4e8c"]
        assert manifest["train"]["class_counts"] == [7, 4]

    def test_missing_raw(self, tmp_path, capsys):
        code = cli.main(["ingest", "--dataset", "mnist", "--raw", str(tmp_path / "nowhere")])
        assert code == 2
        assert "nowhere" in capsys.readouterr().err

    def test_corrupt_raw(self, tmp_path):
        (tmp_path / "train-images-idx3-ubyte").write_bytes(b"\x00\x00\x08\x03junk")
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(b"")
        assert cli.main(["ingest", "--dataset", "mnist", "--raw", str(tmp_path), "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_outputs(self, workspace, members):
        for path in members:
            assert path.exists()
        lines = (workspace / "ckpt" / "mnist_cnn1_history.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_byte_identical_reruns(self, workspace, tmp_path):
        args = train_args(workspace, "cnn1", "--seed", "3", "--name", "again")
        args[args.index("--out") + 1] = str(tmp_path)
        assert cli.main(args) == 0
        first = (tmp_path / "again.ckpt").read_bytes()
        assert cli.main(args) == 0
        assert (tmp_path / "again.ckpt").read_bytes() == first

    def test_cnn3_needs_base(self, workspace, capsys):
        assert cli.main(train_args(workspace, "cnn3")) == 2
        assert "--base" in capsys.readouterr().err

    def test_cnn3_scratch(self, workspace, tmp_path):
        args = train_args(workspace, "cnn3", "--scratch", "--epochs", "1")
        args[args.index("--out") + 1] = str(tmp_path)
        assert cli.main(args) == 0

    def test_bad_data_path(self, workspace, capsys):
        args = train_args(workspace, "cnn1")
        args[args.index("--data") + 1] = "/no/such/dir"
        assert cli.main(args) == 2
        assert "/no/such/dir" in capsys.readouterr().err

    def test_incompatible_base(self, workspace, members, tmp_path):
        # a cnn1 checkpoint has no cnn3 stem
        args = train_args(workspace, "cnn3", "--base", str(members[0]))
        args[args.index("--out") + 1] = str(tmp_path)
        assert cli.main(args) == 4

    def test_divergence_exit(self, workspace, tmp_path):
        args = train_args(workspace, "cnn1", "--lr", "1e6", "--optimizer", "sgd", "--epochs", "5")
        args[args.index("--out") + 1] = str(tmp_path)
        assert cli.main(args) == 3

    def test_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# tiny run\nepochs = 1\nbatch-size = 16\nname = fromcfg\n")
        args = ["train", "--config", str(cfg), "--data", str(workspace / "data" / "mnist"),
                "--arch", "cnn1", "--out", str(tmp_path)]
        assert cli.main(args) == 0
        assert len((tmp_path / "fromcfg_history.csv").read_text().splitlines()) == 2

    def test_config_unknown_key(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_speed = 3\n")
        args = ["train", "--config", str(cfg), "--data", str(workspace / "data" / "mnist"), "--arch", "cnn1"]
        assert cli.main(args) == 2
        assert "learning_speed" in capsys.readouterr().err

    def test_tampered_cache(self, workspace, tmp_path):
        import shutil

        copy = tmp_path / "mnist"
        shutil.copytree(workspace / "data" / "mnist", copy)
        raw = bytearray((copy / "train.kfds").read_bytes())
        raw[30] ^= 1
        (copy / "train.kfds").write_bytes(bytes(raw))
        args = train_args(workspace, "cnn1")
        args[args.index("--data") + 1] = str(copy)
        assert cli.main(args) == 2


class TestEval:
    def test_report(self, workspace, members, tmp_path, capsys):
        code = cli.main(["eval", "--data", str(workspace / "data" / "mnist"), "--checkpoints",
                         *map(str, members), "--out", str(tmp_path)])
        assert code == 0
        report = json.loads((tmp_path / "metrics.json").read_text())
        assert len(report["members"]) == 3 and len(report["classes"]) == 3
        assert all(r["train_count"] == 12 for r in report["classes"])
        assert "ensemble" in (tmp_path / "metrics.txt").read_text()

    def test_same_checkpoint_thrice(self, workspace, members, tmp_path):
        ck = str(members[0])
        assert cli.main(["eval", "--data", str(workspace / "data" / "mnist"), "--checkpoints",
                         ck, ck, ck, "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "metrics.json").read_text())
        assert report["ensemble_accuracy"] == pytest.approx(report["members"][0]["accuracy"])

    def test_incompatible(self, workspace, tmp_path):
        from kanjinet.models import arch_cnn1, build_model
        from kanjinet.training import save_checkpoint

        save_checkpoint(build_model(arch_cnn1((1, 8, 8), 5), 0), {}, tmp_path / "five.ckpt")
        assert cli.main(["eval", "--data", str(workspace / "data" / "mnist"), "--checkpoints",
                         str(tmp_path / "five.ckpt"), "--out", str(tmp_path)]) == 4


class TestAttribute:
    def test_occlusion_grids(self, workspace, members, tmp_path):
        code = cli.main(["attribute", "--data", str(workspace / "data" / "mnist"), "--checkpoints",
                         *map(str, members), "--indices", "0", "5", "7", "--patch", "2", "--stride", "1",
                         "--out", str(tmp_path)])
        assert code == 0
        files = sorted((tmp_path / "occlusion").glob("*.pgm"))
        assert [f.name for f in files] == ["mnist_0_grid.pgm", "mnist_5_grid.pgm", "mnist_7_grid.pgm"]
        assert read_pgm(files[0]).shape == grid_size(1, 4, 8, 8)

    def test_gradient(self, workspace, members, tmp_path):
        assert cli.main(["attribute", "--data", str(workspace / "data" / "mnist"), "--checkpoints",
                         str(members[1]), "--indices", "2", "--method", "gradient", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "gradient" / "mnist_2_grid.pgm").exists()

    @pytest.mark.parametrize("idx", ["-1", "36"])
    def test_bad_index(self, workspace, members, tmp_path, idx):
        assert cli.main(["attribute", "--data", str(workspace / "data" / "mnist"), "--checkpoints",
                         str(members[0]), "--indices", idx, "--out", str(tmp_path)]) == 5


class TestParser:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["--help"])
        assert info.value.code == 0
        assert "attribute" in capsys.readouterr().out

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--bogus"])
        assert info.value.code == 2
