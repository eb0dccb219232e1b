import struct

import numpy as np
import pytest

from fringeforge.errors import FormatError
from fringeforge.formats import (
    QPT_MAGIC, Checkpoint, decode_tensor, encode_tensor, load_checkpoint, load_grid,
    load_tensor, save_checkpoint, save_tensor, write_pgm,
)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestQPT1:
    def test_header_layout(self):
        arr = np.arange(6.0).reshape(1, 2, 1, 3)
        buf = encode_tensor(arr)
        magic, rank, n, c, h, w = struct.unpack_from("<4sB4Q", buf)
        assert (magic, rank, n, c, h, w) == (QPT_MAGIC, 4, 1, 2, 1, 3)
        assert len(buf) == 4 + 1 + 32 + 8 * 6
        assert struct.unpack_from("<d", buf, 37)[0] == 0.0
        assert struct.unpack_from("<d", buf, 37 + 8 * 5)[0] == 5.0

    def test_two_axis_grid_is_stored_as_single_image(self):
        arr, _ = decode_tensor(encode_tensor(np.ones((3, 4))))
        assert arr.shape == (1, 1, 3, 4)

    def test_random_tensors_are_bit_exact(self, rng, tmp_path):
        for k in range(20):
            shape = tuple(int(s) for s in rng.integers(1, 6, size=4))
            arr = rng.normal(scale=10.0 ** rng.integers(-5, 6), size=shape)
            path = tmp_path / f"t{k}.qpt"
            save_tensor(path, arr)
            back = load_tensor(path)
            assert back.shape == shape
            assert np.array_equal(back, arr)

    def test_special_values_survive(self, tmp_path):
        arr = np.array([0.0, -0.0, np.inf, -np.inf, 5e-324]).reshape(1, 1, 1, 5)
        save_tensor(tmp_path / "s.qpt", arr)
        back = load_tensor(tmp_path / "s.qpt")
        assert np.array_equal(back, arr)
        assert np.signbit(back[0, 0, 0, 1])

    def test_bad_magic(self):
        buf = bytearray(encode_tensor(np.zeros((1, 1, 2, 2))))
        buf[:4] = b"QPT2"
        with pytest.raises(FormatError, match="magic"):
            decode_tensor(bytes(buf))

    def test_bad_rank(self):
        buf = bytearray(encode_tensor(np.zeros((1, 1, 2, 2))))
        buf[4] = 3
        with pytest.raises(FormatError, match="rank"):
            decode_tensor(bytes(buf))

    def test_truncated_payload(self):
        buf = encode_tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(FormatError, match="truncated"):
            decode_tensor(buf[:-1])

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "t.qpt"
        path.write_bytes(encode_tensor(np.zeros((1, 1, 2, 2))) + b"x")
        with pytest.raises(FormatError):
            load_tensor(path)

    def test_rank_three_is_rejected(self):
        with pytest.raises(FormatError):
            encode_tensor(np.zeros((2, 2, 2)))


class TestCheckpoint:
    @pytest.fixture
    def ckpt(self, rng):
        state = {
            "enc.1.conv.kernel": rng.normal(size=(4, 1, 3, 3)),
            "enc.1.conv.bias": np.zeros((1, 4, 1, 1)),
            "theta.E1->D1": np.full((1, 1, 1, 1), 0.25),
        }
        meta = {"kind": "supernet", "epoch": 3, "val_psnr": 21.5, "config": {"stages": 2}}
        return Checkpoint(state=state, meta=meta)

    def test_round_trip(self, ckpt, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert list(back.state) == list(ckpt.state)
        for name, arr in ckpt.state.items():
            assert np.array_equal(back.state[name], arr)
        assert back.meta == ckpt.meta
        assert back.epoch == 3
        assert back.val_psnr == 21.5

    def test_byte_deterministic(self, ckpt, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        save_checkpoint(tmp_path / "b.ckpt", ckpt)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_manifest_is_readable_text(self, ckpt, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)
        head = path.read_bytes().split(b"\n...\n", 1)[0].decode("utf-8")
        assert "format: fringeforge-checkpoint" in head
        assert "version: 1" in head
        assert "theta.E1->D1" in head

    def test_version_mismatch(self, ckpt, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, ckpt)
        path.write_bytes(path.read_bytes().replace(b"version: 1", b"version: 2", 1))
        with pytest.raises(FormatError, match="expected 1, found 2"):
            load_checkpoint(path)

    def test_missing_terminator(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"format: fringeforge-checkpoint\n")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_foreign_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"format: other\nversion: 1\n...\n")
        with pytest.raises(FormatError, match="not a"):
            load_checkpoint(path)


class TestImages:
    def test_pgm_layout(self, tmp_path):
        path = tmp_path / "p.pgm"
        write_pgm(path, np.array([[0.0, 6.0, 12.0]]), 0.0, 12.0, "rad")
        data = path.read_bytes()
        lines = data.split(b"\n", 4)
        assert lines[0] == b"P5"
        assert lines[1].startswith(b"# scale 0.0 12.0 rad")
        assert lines[2] == b"3 1"
        assert lines[3] == b"65535"
        assert struct.unpack(">3H", lines[4]) == (0, 32768, 65535)

    def test_pgm_clips_out_of_range(self, tmp_path):
        path = tmp_path / "p.pgm"
        write_pgm(path, np.array([[-5.0, 50.0]]), 0.0, 1.0)
        assert struct.unpack(">2H", path.read_bytes()[-4:]) == (0, 65535)

    def test_pgm_rejects_empty_range(self, tmp_path):
        with pytest.raises(FormatError):
            write_pgm(tmp_path / "p.pgm", np.zeros((2, 2)), 1.0, 1.0)

    def test_load_grid_from_qpt(self, rng, tmp_path):
        grid = rng.uniform(size=(8, 8))
        save_tensor(tmp_path / "g.qpt", grid)
        assert np.array_equal(load_grid(tmp_path / "g.qpt"), grid)

    def test_load_grid_rejects_batches(self, tmp_path):
        save_tensor(tmp_path / "g.qpt", np.zeros((2, 1, 4, 4)))
        with pytest.raises(FormatError):
            load_grid(tmp_path / "g.qpt")

    def test_load_grid_from_png(self, tmp_path):
        Image = pytest.importorskip("PIL.Image")
        pixels = np.array([[0, 255], [51, 102]], dtype=np.uint8)
        Image.fromarray(pixels).save(tmp_path / "g.png")
        np.testing.assert_allclose(load_grid(tmp_path / "g.png"), pixels / 255.0)

    def test_load_grid_reads_exported_pgm(self, tmp_path):
        pytest.importorskip("PIL.Image")
        write_pgm(tmp_path / "p.pgm", np.array([[0.0, 0.5], [1.0, 0.25]]), 0.0, 1.0)
        grid = load_grid(tmp_path / "p.pgm")
        np.testing.assert_allclose(grid, [[0.0, 0.5], [1.0, 0.25]], atol=1e-4)
