"""Conformance of the adapter against the analysis toolkit's oracle client.

These tests deliberately cross the package boundary: the toolkit's
ExternalOracle drives `adapter serve` as a real subprocess over stdio, and
the landmark CSVs are read back with the toolkit's own loader.  That is
the only coupling - the adapter source itself never imports the toolkit.
"""

import io
import shlex
import subprocess
import sys
import time

import numpy as np
import pytest

from xfg.geometry import augment_landmarks, load_landmarks_csv
from xfg.oracle import EXPRESSIONS, ExternalOracle, OracleError

from fer_adapter.backends import AdapterError, TorchScriptBackend, resize_bilinear, softmax
from fer_adapter.cli import main
from fer_adapter.landmarks import extract_landmarks

N_FRAMES = 100
SERVE_STUB = f"{shlex.quote(sys.executable)} -m fer_adapter.cli serve --stub"


def _ok(name: str, details: str) -> None:
    print(f"ACCEPTANCE {name}: PASS ({details})")


def write_pgm(path, img):
    quant = np.floor(np.asarray(img) * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    path.write_bytes(header.encode("ascii") + quant.tobytes())


def face_image(height=96, width=80):
    img = np.full((height, width), 0.1)
    yy, xx = np.mgrid[0:height, 0:width]
    inside = ((yy - height / 2) / (height * 0.38)) ** 2 + (
        (xx - width / 2) / (width * 0.33)
    ) ** 2 <= 1.0
    img[inside] = 0.8
    return img


def test_adapter_conformance(tmp_path):
    """Acceptance: 100 frames served without protocol errors, probability
    sums within 1e-6 of one, and landmark CSVs load through the toolkit."""
    start = time.perf_counter()
    rng = np.random.default_rng(20260814)
    worst_gap = 0.0
    with ExternalOracle(SERVE_STUB, identity="adapter-stub", timeout=60.0) as oracle:
        for _ in range(N_FRAMES):
            height = int(rng.integers(8, 65))
            width = int(rng.integers(8, 65))
            record = oracle.classify(rng.random((height, width)))
            assert record.probs.shape == (len(EXPRESSIONS),)
            gap = abs(float(record.probs.sum()) - 1.0)
            assert gap <= 1e-6
            worst_gap = max(worst_gap, gap)
            np.testing.assert_allclose(record.probs, 1.0 / 6.0, atol=1e-9)

    img = face_image()
    write_pgm(tmp_path / "face.pgm", img)
    written, _, _ = extract_landmarks(tmp_path, stderr=io.StringIO())
    assert written == 1
    lm = load_landmarks_csv(tmp_path / "face.csv", img.shape[1], img.shape[0])
    assert lm.kind == "raw68"
    assert (lm.points[:, 0] < img.shape[1]).all() and (lm.points[:, 0] >= 0).all()
    assert (lm.points[:, 1] < img.shape[0]).all() and (lm.points[:, 1] >= 0).all()
    assert augment_landmarks(lm).kind == "augmented89"

    elapsed = time.perf_counter() - start
    _ok(
        "adapter-conformance",
        f"{N_FRAMES} frames clean, max |sum(probs)-1| = {worst_gap:.2e}, "
        f"landmark CSV loads as raw68, {elapsed:.1f}s",
    )


def test_oracle_error_frames_are_surfaced(tmp_path):
    """A frame the adapter cannot serve must come back as OracleError,
    and the primary client reports the adapter's message."""
    script = tmp_path / "half_broken.py"
    script.write_text(
        "import sys\n"
        "from fer_adapter.protocol import serve\n"
        "class Flaky:\n"
        "    def __init__(self):\n"
        "        self.n = 0\n"
        "    def probs(self, image):\n"
        "        self.n += 1\n"
        "        if self.n == 1:\n"
        "            raise ValueError('first frame rejected')\n"
        "        return [1, 1, 1, 1, 1, 1]\n"
        "sys.exit(serve(Flaky()))\n",
        encoding="ascii",
    )
    cmd = f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}"
    with ExternalOracle(cmd, identity="flaky", timeout=60.0) as oracle:
        with pytest.raises(OracleError, match="first frame rejected"):
            oracle.classify(np.zeros((4, 4)))
        record = oracle.classify(np.zeros((4, 4)))  # loop survived the error
        np.testing.assert_allclose(record.probs, 1.0 / 6.0, atol=1e-12)


def test_serve_missing_model_exits_3():
    proc = subprocess.run(
        [sys.executable, "-m", "fer_adapter.cli", "serve", "--model", "/no/such.pt"],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 3
    assert "error" in proc.stderr


def test_serve_usage_errors():
    assert main(["serve"]) == 2
    assert main(["serve", "--stub", "--model", "x.pt"]) == 2


def test_resize_bilinear_identity_and_constant():
    rng = np.random.default_rng(5)
    img = rng.random((17, 13))
    np.testing.assert_array_equal(resize_bilinear(img, 17, 13), img)
    out = resize_bilinear(np.full((9, 9), 0.37), 16, 32)
    assert out.shape == (16, 32)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_softmax_is_a_distribution():
    out = softmax(np.array([1.0, 2.0, 3.0, -1.0, 0.0, 800.0]))
    assert abs(out.sum() - 1.0) <= 1e-12
    assert out.argmax() == 5
    assert np.isfinite(out).all()


@pytest.fixture(scope="module")
def graph_path(tmp_path_factory):
    torch = pytest.importorskip("torch")

    class MeanLogits(torch.nn.Module):
        def forward(self, x):
            m = x.mean()
            return torch.stack([m * 4.0, -m, m * 8.0, -m, m, -m]).reshape(1, 6)

    path = tmp_path_factory.mktemp("graph") / "mean_logits.pt"
    torch.jit.script(MeanLogits()).save(str(path))
    return path


class TestTorchScriptBackend:
    def test_probs_pick_the_mean_keyed_class(self, graph_path):
        backend = TorchScriptBackend(str(graph_path), resolution=16)
        bright = backend.probs(np.full((40, 40), 0.9))
        assert bright.shape == (6,)
        assert abs(bright.sum() - 1.0) <= 1e-6
        assert bright.argmax() == 2  # the 8*m logit dominates for bright input
        dark = backend.probs(np.zeros((40, 40)))
        np.testing.assert_allclose(dark, 1.0 / 6.0, atol=1e-9)

    def test_color_replication_matches_grayscale(self, graph_path):
        gray = TorchScriptBackend(str(graph_path), resolution=12)
        color = TorchScriptBackend(str(graph_path), resolution=12, grayscale=False)
        img = np.random.default_rng(8).random((20, 28))
        # replicated channels change float32 summation order inside the
        # graph's mean, so agreement is to float32 precision, not exact
        np.testing.assert_allclose(gray.probs(img), color.probs(img), atol=1e-6)

    def test_served_through_protocol_loop(self, graph_path):
        import base64
        import json

        from fer_adapter.protocol import serve

        backend = TorchScriptBackend(str(graph_path), resolution=16)
        u8 = np.full((24, 24), 230, dtype=np.uint8)
        request = {
            "id": 9,
            "width": 24,
            "height": 24,
            "pixels": base64.b64encode(u8.tobytes()).decode("ascii"),
        }
        stdout = io.StringIO()
        rc = serve(
            backend,
            stdin=io.StringIO(json.dumps(request) + "\n"),
            stdout=stdout,
        )
        assert rc == 0
        handshake, reply = (json.loads(l) for l in stdout.getvalue().splitlines())
        assert handshake["protocol"] == "fer-oracle/1"
        assert reply["id"] == 9
        probs = np.array(reply["probs"])
        assert abs(probs.sum() - 1.0) <= 1e-6
        assert probs.argmax() == 2

    def test_bad_resolution_rejected(self, graph_path):
        with pytest.raises(AdapterError):
            TorchScriptBackend(str(graph_path), resolution=0)
