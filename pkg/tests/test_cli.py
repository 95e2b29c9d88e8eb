from pathlib import Path

import numpy as np
import pytest
import yaml
from numpy.testing import assert_array_equal

from mftools import __version__
from mftools.cli import EXIT_ARGUMENT, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from mftools.defocus import make_three_object_scene, render_layers
from mftools.guidance import load_guidance, save_guidance
from mftools.image import load_png, load_png_raw, save_png

GOLDEN = Path(__file__).parent / "data" / "simulate_fig7_focus2_matte.png"


class TestUsage:
    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "gen-dataset" in capsys.readouterr().out

    def test_version(self, capsys):
        assert main(["--version"]) == EXIT_OK
        assert __version__ in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["simulate", "--model", "bogus"],
        ["gen-dataset"],
        ["grad-check", "--size", "six"],
    ])
    def test_usage_errors(self, argv):
        assert main(argv) == EXIT_ARGUMENT

    def test_simulate_needs_a_scene(self, tmp_path):
        assert main(["simulate", "-o", str(tmp_path)]) == EXIT_ARGUMENT


class TestSimulate:
    def test_three_object_render(self, tmp_path, capsys):
        assert main(["simulate", "--three-objects", "2", "--size", "64", "-o", str(tmp_path), "-q"]) == EXIT_OK
        assert "Wrote matte render" in capsys.readouterr().out
        out = load_png(tmp_path / "three_objects_focus2_matte.png")
        expected = render_layers(make_three_object_scene(2, size=64)).image
        assert np.max(np.abs(out - expected)) <= 0.5 / 65535 + 1e-12

    def test_fig7_alias(self, tmp_path):
        for flag in ("--fig7", "--three-objects"):
            assert main(["simulate", flag, "2", "--size", "32", "-o", str(tmp_path / flag.strip("-")), "-q"]) == EXIT_OK
        fig7 = (tmp_path / "fig7" / "three_objects_focus2_matte.png").read_bytes()
        assert fig7 == (tmp_path / "three-objects" / "three_objects_focus2_matte.png").read_bytes()

    def test_matches_reference_render(self, tmp_path):
        assert main(["simulate", "--fig7", "2", "--model", "matte", "--size", "64", "-o", str(tmp_path), "-q"]) == EXIT_OK
        out = (tmp_path / "three_objects_focus2_matte.png").read_bytes()
        if not GOLDEN.exists():
            GOLDEN.parent.mkdir(parents=True, exist_ok=True)
            GOLDEN.write_bytes(out)
            pytest.skip(f"Stored reference render {GOLDEN}, commit it")
        assert out == GOLDEN.read_bytes()

    def test_thread_count_does_not_change_output(self, tmp_path):
        for threads in ("1", "4"):
            assert main(["simulate", "--three-objects", "1", "--size", "48", "-t", threads,
                         "-o", str(tmp_path / threads)]) == EXIT_OK
        one = (tmp_path / "1" / "three_objects_focus1_matte.png").read_bytes()
        assert one == (tmp_path / "4" / "three_objects_focus1_matte.png").read_bytes()

    @pytest.mark.parametrize("model", ["one", "two"])
    def test_other_models(self, tmp_path, model):
        assert main(["simulate", "--three-objects", "3", "--size", "32", "-m", model, "-o", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / f"three_objects_focus3_{model}.png").exists()

    def test_one_parameter_render_differs(self, tmp_path):
        for model in ("one", "matte"):
            assert main(["simulate", "--three-objects", "2", "--size", "64", "-m", model, "-o", str(tmp_path)]) == EXIT_OK
        one = load_png(tmp_path / "three_objects_focus2_one.png")
        matte = load_png(tmp_path / "three_objects_focus2_matte.png")
        assert np.max(np.abs(one - matte)) > 0.01

    def test_all_layers_and_plot(self, tmp_path):
        assert main(["simulate", "--three-objects", "2", "--size", "32", "--all-layers", "--plot",
                     "-o", str(tmp_path)]) == EXIT_OK
        assert len(list(tmp_path.glob("three_objects_focus2_layer*_*.png"))) == 16
        assert (tmp_path / "three_objects_focus2_layers.png").exists()

    def test_layers_need_matte_model(self, tmp_path):
        assert main(["simulate", "--three-objects", "2", "--size", "32", "-m", "one", "--all-layers",
                     "-o", str(tmp_path)]) == EXIT_ARGUMENT

    def test_boundary_scene(self, tmp_path, texture):
        save_png(texture(16, seed=1), tmp_path / "a.png")
        save_png(texture(16, seed=2), tmp_path / "b.png")
        scene = tmp_path / "edge.yaml"
        scene.write_text("kind: boundary\na: a.png\nb: b.png\nline: [1, 0, -8]\nsigma_a: 1.5\n")
        assert main(["simulate", str(scene), "-m", "two", "-o", str(tmp_path / "out")]) == EXIT_OK
        assert (tmp_path / "out" / "edge_two.png").exists()
        assert main(["simulate", str(scene), "-o", str(tmp_path / "out")]) == EXIT_ARGUMENT

    def test_scene_file_error(self, tmp_path):
        scene = tmp_path / "bad.yaml"
        scene.write_text("kind: layers\nlayers: [\n")
        assert main(["simulate", str(scene), "-o", str(tmp_path)]) == EXIT_ARGUMENT

    def test_missing_scene_image(self, tmp_path):
        scene = tmp_path / "scene.yaml"
        scene.write_text("kind: layers\nlayers:\n  - surface: nope.png\n")
        assert main(["simulate", str(scene), "-o", str(tmp_path)]) == EXIT_IO


class TestConfigFile:
    def test_precedence(self, tmp_path):
        cfg = tmp_path / "mftools.yaml"
        cfg.write_text(yaml.safe_dump({"size": 24, "simulate": {"size": 32, "model": "one"}}))
        assert main(["simulate", "--three-objects", "2", "--config", str(cfg), "-o", str(tmp_path / "a")]) == EXIT_OK
        assert load_png_raw(tmp_path / "a" / "three_objects_focus2_one.png").shape[:2] == (32, 32)
        assert main(["simulate", "--three-objects", "2", "--config", str(cfg), "--size", "40",
                     "-o", str(tmp_path / "b")]) == EXIT_OK
        assert load_png_raw(tmp_path / "b" / "three_objects_focus2_one.png").shape[:2] == (40, 40)

    def test_top_level_defaults(self, tmp_path):
        cfg = tmp_path / "mftools.yaml"
        cfg.write_text("size: 24\n")
        assert main(["simulate", "--three-objects", "1", "--config", str(cfg), "-o", str(tmp_path)]) == EXIT_OK
        assert load_png_raw(tmp_path / "three_objects_focus1_matte.png").shape[:2] == (24, 24)

    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--three-objects", "1", "--config", str(tmp_path / "none.yaml")]) == EXIT_IO


class TestGradCheck:
    def test_passes(self, capsys):
        assert main(["grad-check", "--size", "6", "--seed", "1"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Loss_W" in out
        assert "max relative error" in out

    def test_tolerance_exceeded(self):
        assert main(["grad-check", "--size", "4", "--tolerance", "1e-30"]) == EXIT_VALIDATION

    def test_invalid_k(self):
        assert main(["grad-check", "-k", "0.5"]) == EXIT_ARGUMENT


class TestValidate:
    def test_valid_map(self, tmp_path, capsys):
        g = np.zeros((16, 16, 1))
        g[:, 8:] = 1.0
        g[:, 6:10] = 0.5
        save_guidance(g, tmp_path / "gmap.png")
        assert main(["validate", str(tmp_path / "gmap.png")]) == EXIT_OK
        assert "valid" in capsys.readouterr().out

    def test_off_level(self, tmp_path, capsys):
        raw = np.zeros((8, 8))
        raw[3, 5] = 64 / 255
        save_png(raw, tmp_path / "gmap.png")
        assert main(["validate", str(tmp_path / "gmap.png")]) == EXIT_VALIDATION
        assert "(3, 5)" in capsys.readouterr().err

    def test_missing(self, tmp_path):
        assert main(["validate", str(tmp_path / "gmap.png")]) == EXIT_IO


class TestFuse:
    @pytest.fixture
    def sources(self, tmp_path, texture):
        save_png(texture(32, seed=1), tmp_path / "a.png", bit_depth=16)
        save_png(texture(32, seed=2), tmp_path / "b.png", bit_depth=16)
        return str(tmp_path / "a.png"), str(tmp_path / "b.png")

    def test_with_guidance(self, tmp_path, sources):
        save_guidance(np.zeros((32, 32)), tmp_path / "gmap.png")
        assert main(["fuse", "--a", sources[0], "--b", sources[1], "--gmap", str(tmp_path / "gmap.png"),
                     "-o", str(tmp_path / "fused.png")]) == EXIT_OK
        assert_array_equal(load_png(tmp_path / "fused.png"), load_png(sources[1]))

    def test_estimated_with_metrics(self, tmp_path, sources, capsys):
        assert main(["fuse", "--a", sources[0], "--b", sources[1], "-o", str(tmp_path / "fused.png"),
                     "--gmap-out", str(tmp_path / "gmap.png"), "--metrics", str(tmp_path / "m.csv")]) == EXIT_OK
        assert set(np.unique(load_guidance(tmp_path / "gmap.png"))) <= {0.0, 0.5, 1.0}
        assert (tmp_path / "m.csv").exists()
        assert "AG" in capsys.readouterr().out

    def test_oracle_ground_truth(self, tmp_path, sources, texture):
        gt = texture(32, seed=3)
        save_png(gt, tmp_path / "gt.png", bit_depth=16)
        save_guidance(np.full((32, 32), 0.5), tmp_path / "gmap.png")
        assert main(["fuse", "--a", sources[0], "--b", sources[1], "--gmap", str(tmp_path / "gmap.png"),
                     "--oracle-gt", str(tmp_path / "gt.png"), "-o", str(tmp_path / "fused.png")]) == EXIT_OK
        assert_array_equal(load_png(tmp_path / "fused.png"), load_png(tmp_path / "gt.png"))

    def test_shape_mismatch(self, tmp_path, sources):
        save_guidance(np.zeros((20, 20)), tmp_path / "gmap.png")
        assert main(["fuse", "--a", sources[0], "--b", sources[1], "--gmap", str(tmp_path / "gmap.png"),
                     "-o", str(tmp_path / "fused.png")]) == EXIT_ARGUMENT

    def test_conflicting_options(self, tmp_path, sources):
        assert main(["fuse", "--a", sources[0], "--b", sources[1], "--oracle",
                     "-o", str(tmp_path / "fused.png")]) == EXIT_ARGUMENT
        assert main(["fuse", "--a", sources[0], "-o", str(tmp_path / "fused.png")]) == EXIT_ARGUMENT

    def test_missing_source(self, tmp_path, sources):
        assert main(["fuse", "--a", sources[0], "--b", str(tmp_path / "none.png"),
                     "-o", str(tmp_path / "fused.png")]) == EXIT_IO


class TestEvaluate:
    def test_methods(self, tmp_path, texture, capsys):
        for i in range(2):
            img = texture(20, seed=i)
            save_png(img, tmp_path / "x" / f"{i}.png", bit_depth=16)
            save_png(img * 0.5, tmp_path / "y" / f"{i}.png", bit_depth=16)
        report = tmp_path / "report.yaml"
        assert main(["evaluate", "-m", f"x={tmp_path / 'x'}", f"y={tmp_path / 'y'}", "-o", str(report),
                     "--xlsx", str(tmp_path / "report.xlsx")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "(2)*" in out
        doc = yaml.safe_load(report.read_text())
        assert doc["methods"]["x"]["wins"]["AG"] == 2
        assert (tmp_path / "report.xlsx").exists()

    def test_unreadable_input(self, tmp_path, texture):
        save_png(texture(8), tmp_path / "ok.png")
        (tmp_path / "bad.png").write_bytes(b"junk")
        assert main(["evaluate", "-i", str(tmp_path)]) == EXIT_IO

    @pytest.mark.parametrize("argv", [["evaluate"], ["evaluate", "-m", "noequals"]])
    def test_bad_methods(self, argv):
        assert main(argv) == EXIT_ARGUMENT


class TestEndToEnd:
    def test_generate_validate_fuse_evaluate(self, desk_catalog, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["gen-dataset", "-c", str(desk_catalog), "-o", str(data), "--seed", "3",
                     "--verify", "-t", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Wrote 6 pairs" in out
        assert "Verified 6 pairs" in out

        manifest = yaml.safe_load((data / "manifest.yaml").read_text())
        assert manifest["config"]["seed"] == 3
        assert manifest["config"]["out_size"] == 64
        gmap = data / manifest["pairs"][0]["paths"]["gmap"]
        assert main(["validate", str(data), str(gmap)]) == EXIT_OK

        fused = tmp_path / "fused"
        assert main(["fuse", "--pairs", str(data), "--oracle", "-o", str(fused)]) == EXIT_OK
        assert len(list(fused.glob("*.png"))) == 6

        assert main(["evaluate", "-i", str(fused), "-o", str(tmp_path / "report.csv")]) == EXIT_OK
        assert (tmp_path / "report.csv").exists()

    def test_dry_run_writes_nothing(self, desk_catalog, tmp_path, capsys):
        assert main(["gen-dataset", "-c", str(desk_catalog), "-o", str(tmp_path / "data"), "--dry-run"]) == EXIT_OK
        assert "Planned 6 pairs" in capsys.readouterr().out
        assert not (tmp_path / "data").exists()

    def test_invalid_settings(self, desk_catalog, tmp_path):
        assert main(["gen-dataset", "-c", str(desk_catalog), "-o", str(tmp_path / "data"),
                     "--sigma-max", "12"]) == EXIT_ARGUMENT

    def test_failed_pairs_exit_code(self, desk_catalog, tmp_path):
        (tmp_path / "assets" / "fg0.png").write_bytes(b"broken")
        assert main(["gen-dataset", "-c", str(desk_catalog), "-o", str(tmp_path / "data")]) == EXIT_IO

    def test_tampered_dataset(self, desk_catalog, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-dataset", "-c", str(desk_catalog), "-o", str(data)]) == EXIT_OK
        gt = next(data.glob("pairs/*/gt.png"))
        save_png(np.zeros((64, 64, 3)), gt, bit_depth=16)
        assert main(["validate", str(data)]) == EXIT_VALIDATION
