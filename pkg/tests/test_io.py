import json

import numpy as np
import polars as pl
import pytest

from cbct_lab.classical import fdk_reconstruct, view_matrices
from cbct_lab.cli import main
from cbct_lab.errors import FileFormatError, ManifestError
from cbct_lab.geometry import circular_poses, view_pose
from cbct_lab.io_formats import (
    export_slice_png, load_checkpoint, load_view_matrices, read_photon_settings, read_projections,
    read_volume, save_checkpoint, save_view_matrices, window_slice, write_projections, write_volume,
)
from cbct_lab.manifest import (
    GeometryManifest, load_manifest, load_walnut_geometry, parse_manifest, preset_manifest,
    write_manifest,
)
from cbct_lab.metrics import psnr
from cbct_lab.network import init_model_state
from cbct_lab.phantoms import make_phantom, random_ellipsoids, shepp_logan, sphere
from cbct_lab.projector import render_stack
from cbct_lab.training import TrainConfig, train_step
from cbct_lab.volume import Volume

from conftest import small_scan, tiny_model

CIRCULAR_MANIFEST = """{
  "volume": {"shape": [8, 8, 8], "spacing": [2.5, 2.5, 2.5]},
  "detector": {"shape": [16, 16], "spacing": [2.0, 2.0]},
  "circular": {"n_views": 5, "start_angle": 10.0,
               "source_to_object": 500.0, "object_to_detector": 200.0}
}"""


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def test_circular_manifest_expands_to_uniform_poses():
    manifest = parse_manifest(CIRCULAR_MANIFEST)
    assert manifest.is_circular and manifest.n_views == 5
    assert manifest.scan.delta_theta == 72.0
    poses = manifest.poses()
    expected = circular_poses(small_scan(5, start_angle=10.0))
    for a, b in zip(poses, expected):
        np.testing.assert_array_equal(a.source, b.source)


def test_explicit_manifest_uses_vectors_verbatim():
    pose = view_pose(small_scan(3), 2)
    doc = json.loads(CIRCULAR_MANIFEST)
    del doc["circular"]
    doc["views"] = [pose.as_dict()]
    manifest = parse_manifest(json.dumps(doc, indent=2))
    [parsed] = manifest.poses()
    np.testing.assert_array_equal(parsed.u_basis, pose.u_basis)
    np.testing.assert_array_equal(parsed.origin_pixel_center, pose.origin_pixel_center)


def test_manifest_text_round_trip(tmp_path):
    manifest = preset_manifest("desk", 10, 5.0).with_normalization(0.5, 2.0)
    write_manifest(manifest, tmp_path / "m.json")
    loaded = load_manifest(tmp_path / "m.json")
    assert loaded.to_dict() == manifest.to_dict()
    assert loaded.normalization == (0.5, 2.0)


def test_both_acquisition_forms_are_rejected():
    doc = json.loads(CIRCULAR_MANIFEST)
    doc["views"] = [view_pose(small_scan(1), 1).as_dict()]
    text = json.dumps(doc, indent=2)
    with pytest.raises(ManifestError) as err:
        parse_manifest(text)
    assert err.value.field == "views"
    assert err.value.line == text.splitlines().index('  "views": [') + 1


def test_missing_acquisition_form_is_rejected():
    doc = json.loads(CIRCULAR_MANIFEST)
    del doc["circular"]
    with pytest.raises(ManifestError):
        parse_manifest(json.dumps(doc))


def test_manifest_errors_name_line_and_field():
    text = CIRCULAR_MANIFEST.replace('"spacing": [2.0, 2.0]', '"spacing": [2.0, -1.0]')
    with pytest.raises(ManifestError) as err:
        parse_manifest(text)
    assert err.value.field == "detector.spacing"
    assert err.value.line is not None
    assert "detector.spacing" in str(err.value)

    with pytest.raises(ManifestError) as err:
        parse_manifest(CIRCULAR_MANIFEST.replace('"volume"', '"volumes"'))
    assert err.value.field == "volumes" and err.value.line == 2

    with pytest.raises(ManifestError) as err:
        parse_manifest(CIRCULAR_MANIFEST.replace("}\n}", "}\n"))
    assert err.value.line is not None


def test_non_finite_and_parallel_views_are_rejected():
    doc = json.loads(CIRCULAR_MANIFEST)
    del doc["circular"]
    view = view_pose(small_scan(1), 1).as_dict()
    doc["views"] = [dict(view, v=view["u"])]
    with pytest.raises(ManifestError, match="parallel"):
        parse_manifest(json.dumps(doc))
    text = json.dumps({**doc, "views": [view]}).replace(str(view["source"][0]), "NaN", 1)
    with pytest.raises(ManifestError):
        parse_manifest(text)


def test_manifest_requires_exactly_one_form_in_code():
    with pytest.raises(ManifestError):
        GeometryManifest((8, 8, 8), (1.0, 1.0, 1.0), (8, 8))


def test_walnut_vectors(tmp_path):
    poses = circular_poses(small_scan(8))
    rows = [np.concatenate([p.source, p.detector_center, p.u_basis, p.v_basis]) for p in poses]
    np.savetxt(tmp_path / "scan_geom.txt", np.array(rows))
    manifest = load_walnut_geometry(tmp_path / "scan_geom.txt", (16, 16), (8, 8, 8), (2.5, 2.5, 2.5),
                                    n_views=4)
    assert not manifest.is_circular and manifest.n_views == 4
    np.testing.assert_allclose(manifest.poses()[1].source, poses[2].source, atol=1e-9)

    np.savetxt(tmp_path / "bad.txt", np.zeros((3, 9)))
    with pytest.raises(ManifestError):
        load_walnut_geometry(tmp_path / "bad.txt", (16, 16), (8, 8, 8), (2.5, 2.5, 2.5))


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset_manifest("cardiac", 10)


# ---------------------------------------------------------------------------
# Raw volumes and projections
# ---------------------------------------------------------------------------

def test_volume_round_trip_is_identity(tmp_path, rng):
    data = rng.uniform(size=(2, 5, 4, 3)).astype(np.float32).astype(np.float64)
    vol = Volume(data, (0.5, 1.0, 2.0))
    write_volume(vol, tmp_path / "v.raw")
    loaded = read_volume(tmp_path / "v.raw")
    np.testing.assert_array_equal(loaded.data, vol.data)
    assert loaded.spacing == vol.spacing


def test_raw_layout_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float64).reshape(4, 3, 2)
    write_volume(Volume(data, (1.0, 1.0, 1.0)), tmp_path / "v.raw")
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
    assert raw[:4].tolist() == data[:, 0, 0].tolist()
    assert raw[4] == data[0, 1, 0]


def test_truncated_volume_is_rejected(tmp_path):
    write_volume(Volume.zeros((4, 4, 4), (1.0, 1.0, 1.0)), tmp_path / "v.raw")
    (tmp_path / "v.raw").write_bytes((tmp_path / "v.raw").read_bytes()[:-4])
    with pytest.raises(FileFormatError):
        read_volume(tmp_path / "v.raw")
    (tmp_path / "v.json").unlink()
    with pytest.raises(FileFormatError):
        read_volume(tmp_path / "v.raw")


def test_projection_round_trip(tmp_path):
    vol = sphere((8, 8, 8), (2.5, 2.5, 2.5))
    stack = render_stack(vol, circular_poses(small_scan(3, detector_shape=(16, 12))))
    write_projections(stack, tmp_path / "proj", photon={"i0": 1e5, "i1": 0.0, "seed": 2})
    assert sorted(p.name for p in (tmp_path / "proj").glob("*.raw")) == [
        "proj_0001.raw", "proj_0002.raw", "proj_0003.raw"]
    loaded = read_projections(tmp_path / "proj")
    np.testing.assert_allclose(loaded.array, stack.array.astype(np.float32))
    np.testing.assert_array_equal(loaded.poses[2].v_basis, stack.poses[2].v_basis)
    assert read_photon_settings(tmp_path / "proj")["seed"] == 2

    (tmp_path / "proj" / "proj_0002.raw").unlink()
    with pytest.raises(FileFormatError, match="missing view 2"):
        read_projections(tmp_path / "proj")


def test_view_matrices_round_trip(tmp_path):
    shape, spacing = (8, 8, 8), (2.5, 2.5, 2.5)
    stack = render_stack(sphere(shape, spacing), circular_poses(small_scan(2)))
    matrices = view_matrices(stack, shape, spacing)
    save_view_matrices(matrices, tmp_path / "m", shape, spacing, None)
    loaded = load_view_matrices(tmp_path / "m", 2, shape, (16, 16))
    assert (loaded[1] != matrices[1]).nnz == 0
    with pytest.raises(FileFormatError):
        load_view_matrices(tmp_path / "m", 3, shape, (16, 16))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_case):
    cfg = tiny_model()
    train_cfg = TrainConfig(ray_batch=8)
    state, _ = train_step(tiny_case, init_model_state(cfg), cfg, train_cfg)
    save_checkpoint(tmp_path / "model.ckpt", state, cfg, train_cfg)
    loaded, loaded_cfg, loaded_train = load_checkpoint(tmp_path / "model.ckpt")
    assert loaded_cfg == cfg
    assert loaded.step == 1
    assert loaded_train["ray_batch"] == 8
    for name in state.params:
        np.testing.assert_array_equal(loaded.params[name], state.params[name])
        np.testing.assert_array_equal(loaded.m[name], state.m[name])
        np.testing.assert_array_equal(loaded.v[name], state.v[name])


def test_corrupt_checkpoints(tmp_path):
    cfg = tiny_model()
    save_checkpoint(tmp_path / "model.ckpt", init_model_state(cfg), cfg)
    payload = (tmp_path / "model.ckpt").read_bytes()
    (tmp_path / "short.ckpt").write_bytes(payload[:-10])
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + payload[8:])
    for name in ("short.ckpt", "magic.ckpt", "absent.ckpt"):
        with pytest.raises(FileFormatError):
            load_checkpoint(tmp_path / name)


# ---------------------------------------------------------------------------
# Display export
# ---------------------------------------------------------------------------

def test_window_slice(tmp_path):
    data = np.zeros((4, 4, 4))
    data[:, :, 2] = np.linspace(0.0, 0.03, 4)[:, None]
    vol = Volume(data, (1.0, 1.0, 1.0))
    image = window_slice(vol, axis=2, window=(0.0, 0.03))
    assert image.dtype == np.uint8
    assert image[0, 0] == 0 and image[3, 0] == 255
    hu = window_slice(vol, axis=2, window=(-1000.0, 500.0), hu=True)
    assert hu[3, 0] == 255 and hu[0, 0] == 0
    with pytest.raises(IndexError):
        window_slice(vol, axis=0, index=4)
    export_slice_png(vol, tmp_path / "slice.png")
    assert (tmp_path / "slice.png").stat().st_size > 0


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

def test_sphere_phantom_volume():
    radius = 10.0
    vol = sphere((64, 64, 64), (1.0, 1.0, 1.0), radius=radius, mu=0.02)
    values = vol.values
    assert values[32, 32, 32] == 0.02
    assert set(np.unique(values)) == {0.0, 0.02}
    measured = np.count_nonzero(values) * 1.0
    assert measured == pytest.approx(4 / 3 * np.pi * radius ** 3, rel=0.02)


def test_random_ellipsoids_are_seeded():
    a = random_ellipsoids((16, 16, 16), (1.0, 1.0, 1.0), k=5, seed=3)
    b = random_ellipsoids((16, 16, 16), (1.0, 1.0, 1.0), k=5, seed=3)
    c = random_ellipsoids((16, 16, 16), (1.0, 1.0, 1.0), k=5, seed=4)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values.max() <= 0.03 and a.values.min() >= 0.0
    assert not np.any(random_ellipsoids((8, 8, 8), (1.0, 1.0, 1.0), k=0).values)


def test_shepp_logan_head():
    vol = shepp_logan((32, 32, 32), (1.0, 1.0, 1.0))
    values = vol.values
    # brain tissue: skull 1.0 minus the -0.8 interior, scaled to mm^-1
    assert values[16, 16, 16] == pytest.approx(0.2 * 0.02)
    assert values.max() <= 0.02 + 1e-12 and values.min() >= -1e-12
    assert values[0, 0, 0] == 0.0
    assert make_phantom("shepp-logan", (32, 32, 32), (1.0, 1.0, 1.0)).values.sum() == pytest.approx(values.sum())
    with pytest.raises(ValueError):
        make_phantom("torus", (8, 8, 8), (1.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

SPHERE_MANIFEST = {
    "volume": {"shape": [32, 32, 32], "spacing": [2.5, 2.5, 2.5]},
    "detector": {"shape": [32, 32], "spacing": [3.5, 3.5]},
    "circular": {"n_views": 20, "source_to_object": 500.0, "object_to_detector": 200.0},
}


def test_cli_phantom_simulate_fdk_eval(tmp_path, capsys):
    manifest = tmp_path / "sphere.json"
    manifest.write_text(json.dumps(SPHERE_MANIFEST, indent=2))
    phantom, projections = tmp_path / "sphere.raw", tmp_path / "proj"
    fdk, metrics = tmp_path / "fdk.raw", tmp_path / "metrics.parquet"

    assert main(["phantom", "--kind", "sphere", "--manifest", str(manifest), "--radius", "20",
                 "--out", str(phantom)]) == 0
    assert main(["simulate", "--manifest", str(manifest), "--volume", str(phantom), "--workers", "1",
                 "--out", str(projections)]) == 0
    assert (projections / "manifest.json").exists()
    assert main(["fdk", "--projections", str(projections), "--out", str(fdk)]) == 0

    truth = read_volume(phantom)
    expected = fdk_reconstruct(read_projections(projections), truth.shape, truth.spacing)
    np.testing.assert_allclose(read_volume(fdk).values, expected.values.astype(np.float32), rtol=1e-6, atol=1e-9)
    empty = Volume.zeros(truth.shape, truth.spacing)
    assert psnr(truth, read_volume(fdk)) > psnr(truth, empty)

    capsys.readouterr()
    assert main(["eval", "--reference", str(phantom), "--estimate", str(phantom), str(fdk),
                 "--method", "truth", "fdk", "--views", "20", "--out", str(metrics)]) == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]
    assert lines[0]["ssim"] == 1.0 and lines[0]["psnr_infinite"]
    assert pl.read_parquet(metrics)["method"].to_list() == ["truth", "fdk"]


def test_cli_simulate_five_views_uses_wide_steps(tmp_path):
    phantom, projections = tmp_path / "p.raw", tmp_path / "proj"
    assert main(["phantom", "--kind", "sphere", "--out", str(phantom)]) == 0
    assert main(["simulate", "--views", "5", "--volume", str(phantom), "--workers", "1",
                 "--noise-i0", "1e5", "--out", str(projections)]) == 0
    written = load_manifest(projections / "manifest.json")
    assert written.scan.delta_theta == 72.0
    assert read_photon_settings(projections)["i0"] == 1e5
    assert len(read_projections(projections)) == 5


def test_cli_log_eps_sets_the_clamp_on_starved_pixels(tmp_path):
    phantom = tmp_path / "p.raw"
    assert main(["phantom", "--kind", "sphere", "--out", str(phantom)]) == 0
    peaks = {}
    for eps in (1e-6, 1e-2):
        projections = tmp_path / f"proj_{eps:g}"
        # two flat-field counts leave many pixels with no photons at all
        assert main(["simulate", "--views", "5", "--volume", str(phantom), "--workers", "1",
                     "--noise-i0", "2", "--noise-i1", "0", "--log-eps", str(eps), "--seed", "4",
                     "--out", str(projections)]) == 0
        assert read_photon_settings(projections)["log_eps"] == eps
        peaks[eps] = read_projections(projections).array
        assert peaks[eps].max() == pytest.approx(-np.log(eps), rel=1e-6)
    starved = peaks[1e-6] == peaks[1e-6].max()
    assert starved.any()
    np.testing.assert_allclose(peaks[1e-2][starved], -np.log(1e-2), rtol=1e-6)
    np.testing.assert_array_equal(peaks[1e-2][~starved], peaks[1e-6][~starved])


def test_cli_sart_and_export(tmp_path):
    phantom, projections, sart = tmp_path / "p.raw", tmp_path / "proj", tmp_path / "sart.raw"
    assert main(["phantom", "--kind", "ellipsoids", "--seed", "3", "--out", str(phantom)]) == 0
    assert main(["simulate", "--views", "5", "--volume", str(phantom), "--workers", "1",
                 "--out", str(projections)]) == 0
    assert main(["sart", "--projections", str(projections), "--iterations", "2", "--out", str(sart)]) == 0
    assert read_volume(sart).shape == (32, 32, 32)
    assert main(["export", "--volume", str(sart), "--out", str(tmp_path / "sart.png")]) == 0
    assert (tmp_path / "sart.png").exists()


def test_cli_train_and_infer(tmp_path):
    manifest = tmp_path / "tiny.json"
    manifest.write_text(json.dumps({
        "volume": {"shape": [8, 8, 8], "spacing": [2.5, 2.5, 2.5]},
        "detector": {"shape": [16, 16], "spacing": [2.0, 2.0]},
        "circular": {"n_views": 3, "source_to_object": 500.0, "object_to_detector": 200.0},
    }))
    ckpt, history = tmp_path / "model.ckpt", tmp_path / "history.parquet"
    model_args = ["--downsample", "2", "--levels", "1", "--base-channels", "4", "--residual-blocks", "1",
                  "--width", "4"]
    assert main(["train", "--manifest", str(manifest), "--synthetic", "2", "--k", "3", "--max-steps", "2",
                 "--ray-batch", "8", *model_args, "--history", str(history), "--out", str(ckpt)]) == 0
    assert len(pl.read_parquet(history)) == 2
    _, cfg, _ = load_checkpoint(ckpt)
    assert cfg.downsample == 2 and cfg.encoder.channels == 4

    phantom, projections = tmp_path / "p.raw", tmp_path / "proj"
    assert main(["phantom", "--kind", "ellipsoids", "--manifest", str(manifest), "--out", str(phantom)]) == 0
    assert main(["simulate", "--manifest", str(manifest), "--volume", str(phantom), "--workers", "1",
                 "--out", str(projections)]) == 0
    out = tmp_path / "pred.raw"
    assert main(["infer", "--checkpoint", str(ckpt), "--projections", str(projections), "--out", str(out)]) == 0
    assert read_volume(out).shape == (8, 8, 8)
    assert main(["infer", "--checkpoint", str(ckpt), "--projections", str(projections), "--downsample", "4",
                 "--out", str(out)]) == 1


def test_cli_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"volume": {"shape": [8, 8, 8]}}')
    assert main(["phantom", "--manifest", str(bad), "--out", str(tmp_path / "p.raw")]) == 1
    assert "✗ Error" in capsys.readouterr().err
    assert main(["fdk", "--projections", str(tmp_path / "missing"), "--out", str(tmp_path / "f.raw")]) == 1


def test_cli_gradcheck(tmp_path):
    manifest = tmp_path / "tiny.json"
    manifest.write_text(json.dumps({
        "volume": {"shape": [8, 8, 8], "spacing": [2.5, 2.5, 2.5]},
        "detector": {"shape": [16, 16], "spacing": [2.0, 2.0]},
        "circular": {"n_views": 2, "source_to_object": 500.0, "object_to_detector": 200.0},
    }))
    assert main(["gradcheck", "--manifest", str(manifest), "--downsample", "2", "--levels", "1",
                 "--base-channels", "4", "--residual-blocks", "1", "--width", "4", "--samples", "10",
                 "--ray-batch", "16"]) == 0
