import hashlib
import struct

import numpy as np
import pytest

from latentflow.checkpoint import load_checkpoint, save_checkpoint
from latentflow.dataset import (
    SHAPE_KINDS,
    Dataset,
    generate_shapes,
    load_dataset,
    render_shape,
    save_dataset,
    write_ppm_grid,
)
from latentflow.errors import FormatError
from latentflow.manifest import ArtifactWriter, sha256_file
from latentflow.rng import stream


def sha(path):
    return sha256_file(path)


class TestShapes:
    def test_round_robin_classes(self):
        ds = generate_shapes(8, seed=0)
        assert list(ds.labels) == list(range(8))

    def test_label_histogram_uniform(self):
        ds = generate_shapes(10_000, seed=1)
        counts = np.bincount(ds.labels, minlength=8)
        n, p = 10_000, 1 / 8
        bound = 3 * np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= bound + 1)  # round-robin is exact

    def test_pixels_in_range(self):
        ds = generate_shapes(64, seed=2)
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0

    def test_render_deterministic(self):
        a = render_shape(3, 0.5, 0.5, 0.3, 2, -0.7)
        b = render_shape(3, 0.5, 0.5, 0.3, 2, -0.7)
        assert np.array_equal(a, b)

    def test_all_kinds_distinct(self):
        renders = [render_shape(k, 0.5, 0.5, 0.3, 0, -0.6) for k in range(len(SHAPE_KINDS))]
        for i in range(len(renders)):
            for j in range(i + 1, len(renders)):
                assert not np.allclose(renders[i], renders[j]), (i, j)

    def test_params_determine_image(self):
        ds = generate_shapes(16, seed=3)
        for i in range(16):
            kind, cx, cy, scale, hue, bg = ds.shape_params[i]
            redo = render_shape(int(kind), float(cx), float(cy), float(scale),
                                int(hue), float(bg))
            # stored images went through u8 quantization
            assert np.max(np.abs(redo - ds.images[i])) <= 1 / 127.5 + 1e-7


class TestDatasetFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = generate_shapes(50, seed=4)
        path = tmp_path / "d.lfds"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.shape_params, ds.shape_params)
        assert back.num_classes == ds.num_classes
        # writing the loaded dataset reproduces the file byte for byte
        path2 = tmp_path / "d2.lfds"
        save_dataset(path2, back)
        assert sha(path) == sha(path2)
        assert sha(str(path) + ".shapes") == sha(str(path2) + ".shapes")

    def test_same_seed_same_sha(self, tmp_path):
        p1, p2 = tmp_path / "a.lfds", tmp_path / "b.lfds"
        save_dataset(p1, generate_shapes(100, seed=7))
        save_dataset(p2, generate_shapes(100, seed=7))
        assert sha(p1) == sha(p2)

    def test_different_seed_differs(self, tmp_path):
        p1, p2 = tmp_path / "a.lfds", tmp_path / "b.lfds"
        save_dataset(p1, generate_shapes(100, seed=7))
        save_dataset(p2, generate_shapes(100, seed=8))
        assert sha(p1) != sha(p2)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "d.lfds"
        save_dataset(path, generate_shapes(5, seed=0))
        blob = path.read_bytes()
        magic, version, n, h, w, c, k = struct.unpack_from("<4sIIHHHH", blob, 0)
        assert magic == b"LFDS" and version == 1
        assert (n, h, w, c, k) == (5, 16, 16, 3, 8)
        assert len(blob) == 20 + n * (2 + h * w * c)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lfds"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_rejects_truncation(self, tmp_path):
        path = tmp_path / "d.lfds"
        save_dataset(path, generate_shapes(5, seed=0))
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_loads_without_sidecar(self, tmp_path):
        path = tmp_path / "d.lfds"
        ds = generate_shapes(5, seed=0)
        ds = Dataset(images=ds.images, labels=ds.labels, num_classes=8)
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.shape_params is None


class TestCheckpointFile:
    def make_tensors(self):
        rng = stream(5)
        return {
            "model.block0.attn.qkv.w": rng.standard_normal((8, 24)).astype(np.float32),
            "model.pos": rng.standard_normal((4, 8)).astype(np.float32),
            "ema.pos": rng.standard_normal((4, 8)).astype(np.float32),
            "scalar": np.float32(3.5).reshape(()),
        }

    def test_roundtrip_bit_exact(self, tmp_path):
        tensors = self.make_tensors()
        meta = {"seed": "0", "step": "100", "config.train.lr": "0.0003"}
        p1 = tmp_path / "a.lfck"
        save_checkpoint(p1, tensors, meta)
        back_t, back_m = load_checkpoint(p1)
        assert back_m == meta
        for k in tensors:
            assert np.array_equal(back_t[k], tensors[k])
            assert back_t[k].shape == np.asarray(tensors[k]).shape
        p2 = tmp_path / "b.lfck"
        save_checkpoint(p2, back_t, back_m)
        assert sha(p1) == sha(p2)

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "a.lfck"
        save_checkpoint(path, self.make_tensors(), {"k": "v"})
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_rejects_trailing_garbage(self, tmp_path):
        path = tmp_path / "a.lfck"
        save_checkpoint(path, self.make_tensors(), {})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_metadata_validation(self, tmp_path):
        with pytest.raises(FormatError):
            save_checkpoint(tmp_path / "x.lfck", {}, {"bad=key": "v"})
        with pytest.raises(FormatError):
            save_checkpoint(tmp_path / "x.lfck", {}, {"k": "multi\nline"})


class TestManifest:
    def test_lists_all_artifacts(self, tmp_path):
        writer = ArtifactWriter(tmp_path / "out")
        writer.write("a.txt", lambda p: open(p, "w").write("hello"))
        writer.write("sub/b.bin", lambda p: open(p, "wb").write(b"\x01\x02"))
        manifest = writer.finalize()
        lines = open(manifest).read().splitlines()
        assert len(lines) == 2
        assert lines[0].endswith("a.txt")
        assert lines[1].endswith("sub/b.bin")
        digest, rel = lines[0].split("  ")
        assert digest == hashlib.sha256(b"hello").hexdigest()

    def test_identical_runs_identical_manifest(self, tmp_path):
        def run(out):
            writer = ArtifactWriter(out)
            ds = generate_shapes(20, seed=3)
            writer.write("d.lfds", lambda p: save_dataset(p, ds))
            writer.add(str(out / "d.lfds") + ".shapes")
            return open(writer.finalize()).read()

        assert run(tmp_path / "r1") == run(tmp_path / "r2")


def test_ppm_grid(tmp_path):
    ds = generate_shapes(9, seed=0)
    path = tmp_path / "grid.ppm"
    write_ppm_grid(path, ds.images, cols=3)
    blob = path.read_bytes()
    assert blob.startswith(b"P6 48 48 255\n")
    assert len(blob) == len(b"P6 48 48 255\n") + 48 * 48 * 3
