"""End-to-end CLI behaviour: exit codes, outputs, manifests, determinism."""

import numpy as np
import pytest

from featmorph.cli import main as cli_main
from featmorph.cli import read_manifest
from featmorph.imgio import load_image_rgb, save_image_rgb, save_mask
from featmorph.neighbors import load_index
from featmorph.network import random_network, save_weights
from featmorph.reconstruct import psnr

TINY_PLAN = [("conv1_1", 6), ("conv2_1", 6), ("conv3_1", 8), ("conv4_1", 8), ("conv5_1", 8)]


def run_cli(argv):
    try:
        return cli_main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def smooth_image(seed, h=200, w=200):
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 3, h), np.linspace(0, 3, w), indexing="ij")
    img = np.stack(
        [127 + 100 * np.sin(yy * (seed % 5 + 1) / 2 + c) * np.cos(xx - c) for c in range(3)]
    )[None]
    return (img + rng.normal(0, 6, img.shape)).astype(np.float32)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli_ws")
    weights = ws / "tiny.dfiw"
    save_weights(random_network(TINY_PLAN, seed=500), str(weights))

    images = ws / "images"
    images.mkdir()
    paths = []
    for i in range(10):
        p = images / f"face{i:02d}.png"
        save_image_rgb(smooth_image(i), str(p))
        paths.append(str(p))

    attrs = ws / "attrs.csv"
    rows = ["path,smiling,senior"]
    for i, p in enumerate(paths):
        smiling = "1" if i < 5 else "-1"
        senior = "1" if i % 2 == 0 else "-1"
        rows.append(f"{p},{smiling},{senior}")
    attrs.write_text("\n".join(rows) + "\n", encoding="utf-8")

    index = ws / "faces.dfix"
    code = run_cli(
        ["build-index", "--images", images, "--attrs", attrs,
         "--weights", weights, "--out", index, "--any-arch"]
    )
    assert code == 0
    return {"ws": ws, "weights": weights, "images": images, "attrs": attrs,
            "index": index, "paths": paths}


class TestBuildIndex:
    def test_missing_weights_exits_2_naming_path(self, tmp_path, capsys):
        code = run_cli(
            ["build-index", "--images", tmp_path, "--weights", tmp_path / "nope.dfiw",
             "--out", tmp_path / "o.dfix"]
        )
        assert code == 2
        assert "nope.dfiw" in capsys.readouterr().err

    def test_empty_dir_gives_valid_empty_index(self, workspace, tmp_path, caplog):
        empty = tmp_path / "empty"
        empty.mkdir()
        out = tmp_path / "empty.dfix"
        with caplog.at_level("WARNING"):
            code = run_cli(
                ["build-index", "--images", empty, "--weights", workspace["weights"],
                 "--out", out, "--any-arch"]
            )
        assert code == 0
        assert len(load_index(str(out))) == 0
        assert any("empty" in rec.message for rec in caplog.records)

    def test_ten_image_fixture(self, workspace):
        index = load_index(str(workspace["index"]))
        assert len(index) == 10
        assert index.attribute_names == ("smiling", "senior")
        manifest = read_manifest(f"{workspace['index']}.manifest")
        assert manifest["records"] == "10"
        assert manifest["command"] == "build-index"


class TestTransform:
    def test_beta_zero_near_identity(self, workspace, tmp_path):
        src = workspace["paths"][0]
        out = tmp_path / "out.png"
        code = run_cli(
            ["transform", "--input", src, "--weights", workspace["weights"],
             "--beta", 0, "--iters", 8, "--out", out, "--any-arch"]
        )
        assert code == 0
        assert psnr(load_image_rgb(str(out)), load_image_rgb(src)) > 30.0
        manifest = read_manifest(f"{out}.manifest")
        assert manifest["beta"] == "0.0"
        assert manifest["alpha"] == "0.0"

    def test_unknown_attribute_exits_2_listing_names(self, workspace, tmp_path, capsys):
        code = run_cli(
            ["transform", "--input", workspace["paths"][0], "--index", workspace["index"],
             "--weights", workspace["weights"], "--target-attrs", "mустache=+1",
             "--out", tmp_path / "o.png", "--any-arch"]
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "smiling" in err and "senior" in err

    def test_default_smoke_run_writes_output_and_manifest(self, workspace, tmp_path):
        out = tmp_path / "smile.png"
        trace = tmp_path / "trace.csv"
        code = run_cli(
            ["transform", "--input", workspace["paths"][7], "--index", workspace["index"],
             "--weights", workspace["weights"], "--target-attrs", "smiling=+1",
             "--k", 3, "--iters", 4, "--out", out, "--trace", trace, "--any-arch"]
        )
        assert code == 0
        assert out.exists()
        manifest = read_manifest(f"{out}.manifest")
        # paper-default hyperparameters survive into the manifest untouched
        assert manifest["lambda"] == "0.001"
        assert manifest["tv_exponent"] == "2.0"
        assert manifest["beta"] == "0.4"
        assert float(manifest["alpha"]) > 0
        assert trace.exists()
        assert (tmp_path / "trace.png").exists()

    def test_beta_positive_requires_index_and_attrs(self, workspace, tmp_path, capsys):
        code = run_cli(
            ["transform", "--input", workspace["paths"][0], "--weights", workspace["weights"],
             "--beta", 0.4, "--out", tmp_path / "o.png", "--any-arch"]
        )
        assert code == 2
        assert "--target-attrs" in capsys.readouterr().err

    def test_deterministic_rerun_bit_identical(self, workspace, tmp_path):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{run}.png"
            code = run_cli(
                ["transform", "--input", workspace["paths"][2], "--index", workspace["index"],
                 "--weights", workspace["weights"], "--target-attrs", "senior=+1",
                 "--k", 2, "--iters", 3, "--seed", 11, "--out", out, "--any-arch"]
            )
            assert code == 0
            outs.append(out)
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert (
            read_manifest(f"{outs[0]}.manifest")["final_objective"]
            == read_manifest(f"{outs[1]}.manifest")["final_objective"]
        )


class TestInpaint:
    @pytest.fixture()
    def mask_file(self, tmp_path):
        mask = np.zeros((200, 200), dtype=bool)
        mask[70:130, 70:130] = True
        p = tmp_path / "mask.png"
        save_mask(mask, str(p))
        return p, mask

    def test_default_run_uses_faces_strength(self, workspace, tmp_path, mask_file):
        mask_path, mask = mask_file
        out = tmp_path / "filled.png"
        code = run_cli(
            ["inpaint", "--input", workspace["paths"][4], "--mask", mask_path,
             "--index", workspace["index"], "--weights", workspace["weights"],
             "--k", 3, "--iters", 3, "--out", out, "--any-arch"]
        )
        assert code == 0
        manifest = read_manifest(f"{out}.manifest")
        assert manifest["beta"] == "1.6"
        assert manifest["composite"] == "True"
        # compositing contract: known pixels equal the input exactly
        result = load_image_rgb(str(out))
        original = load_image_rgb(workspace["paths"][4])
        np.testing.assert_array_equal(result[..., ~mask], original[..., ~mask])
        # the input image itself is indexed and must have been excluded
        neighbors = manifest["neighbors"].split(",")
        assert str(4) not in neighbors

    def test_shoes_preset_strength(self, workspace, tmp_path, mask_file):
        mask_path, _ = mask_file
        out = tmp_path / "filled2.png"
        code = run_cli(
            ["inpaint", "--input", workspace["paths"][5], "--mask", mask_path,
             "--index", workspace["index"], "--weights", workspace["weights"],
             "--dataset", "shoes", "--k", 2, "--iters", 2, "--out", out, "--any-arch"]
        )
        assert code == 0
        assert read_manifest(f"{out}.manifest")["beta"] == "2.8"

    def test_degenerate_mask_fails_cleanly(self, workspace, tmp_path):
        blank = tmp_path / "blank_mask.png"
        save_mask(np.zeros((200, 200), dtype=bool), str(blank))
        code = run_cli(
            ["inpaint", "--input", workspace["paths"][0], "--mask", blank,
             "--index", workspace["index"], "--weights", workspace["weights"],
             "--iters", 2, "--out", tmp_path / "o.png", "--any-arch"]
        )
        assert code == 1


class TestGradcheck:
    def test_fixed_seed_passes(self, capsys):
        assert run_cli(["gradcheck", "--seed", 3]) == 0
        out = capsys.readouterr().out
        assert "conv2d_backward_input" in out
        assert "max rel error" in out
        assert "FAIL" not in out

    def test_corrupted_build_detected(self, capsys):
        assert run_cli(["gradcheck", "--seed", 3, "--self-test-corrupt"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_deterministic(self, capsys):
        run_cli(["gradcheck", "--seed", 5])
        first = capsys.readouterr().out
        run_cli(["gradcheck", "--seed", 5])
        second = capsys.readouterr().out
        assert first == second
