"""Uniform access to the black-box expression classifier.

Two families of oracle: synthetic ones (region-softmax / uniform /
constant-class) with analytically known behavior, and an external child
process speaking the fer-oracle/1 wire protocol over stdin/stdout.

All probabilities pass through PredictionRecord validation before anything
downstream sees them. Expression indices follow xfg.expressions.EXPRESSIONS.
"""

from __future__ import annotations

import base64
import json
import os
import select
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass

import numpy as np

from .expressions import EXPRESSIONS

N_CLASSES = len(EXPRESSIONS)
PROTOCOL = "fer-oracle/1"
PROB_SUM_TOL = 1e-3
DEFAULT_TIMEOUT = 30.0


class OracleError(RuntimeError):
    """Protocol violation, invalid probabilities, child failure, or timeout."""


class BatchError(OracleError):
    """A batch aborted on its first (lowest-index) error.

    ``results`` holds the records completed before the abort (None where
    missing); ``failed_index`` is the input position that failed.
    """

    def __init__(self, failed_index: int, results: list, cause: Exception):
        super().__init__(f"batch item {failed_index} failed: {cause}")
        self.failed_index = failed_index
        self.results = results
        self.cause = cause


@dataclass
class PredictionRecord:
    probs: np.ndarray  # (6,) float64
    predicted: int

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (N_CLASSES,):
            raise OracleError(f"expected {N_CLASSES} probabilities, got {self.probs.shape}")
        if not np.isfinite(self.probs).all():
            raise OracleError("non-finite probability")
        if (self.probs < 0).any():
            raise OracleError("negative probability")
        s = float(self.probs.sum())
        if abs(s - 1.0) > PROB_SUM_TOL:
            raise OracleError(f"probabilities sum to {s:.6f}, not 1 within {PROB_SUM_TOL}")
        if self.predicted != int(np.argmax(self.probs)):
            raise OracleError("predicted class is not the argmax")

    @classmethod
    def from_probs(cls, probs) -> "PredictionRecord":
        probs = np.asarray(probs, dtype=np.float64)
        # np.argmax returns the first maximum: lowest index wins ties
        return cls(probs, int(np.argmax(probs)) if probs.size else -1)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("oracle input must be a non-empty 2-d grayscale image")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("oracle input values must lie in [0, 1]")
    return img


def image_to_u8(img: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] image to u8 (round half up) for the wire."""
    img = _check_image(img)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def fraction_box_slices(box, width: int, height: int) -> tuple[slice, slice]:
    """Pixel (rows, cols) slices of an (x0,y0,x1,y1) fraction-of-frame box.

    Rounding is half-up on the scaled edges; a box always covers at least
    one pixel.
    """
    x0, y0, x1, y1 = box
    xs = int(np.floor(x0 * width + 0.5))
    xe = max(xs + 1, int(np.floor(x1 * width + 0.5)))
    ys = int(np.floor(y0 * height + 0.5))
    ye = max(ys + 1, int(np.floor(y1 * height + 0.5)))
    return slice(ys, min(ye, height)), slice(xs, min(xe, width))


# ---------------------------------------------------------------------------
# synthetic oracles

class SyntheticOracle:
    """Base for in-process oracles: deterministic, analytically checkable."""

    kind = "synthetic"

    def __init__(self, identity: str):
        self.identity = identity

    def classify(self, img: np.ndarray) -> PredictionRecord:
        img = _check_image(img)
        return PredictionRecord.from_probs(self._probs_batch(img[None])[0])

    def classify_batch(self, imgs) -> list[PredictionRecord]:
        stack = None
        if isinstance(imgs, np.ndarray) and imgs.ndim == 3:
            stack = np.asarray(imgs, dtype=np.float64)
        else:
            imgs = list(imgs)
            if not imgs:
                return []
            if len({np.asarray(im).shape for im in imgs}) == 1:
                stack = np.stack(imgs).astype(np.float64)
        if stack is None:  # mixed shapes: fall back to one-by-one
            out = []
            for i, im in enumerate(imgs):
                try:
                    out.append(self.classify(im))
                except (OracleError, ValueError) as exc:
                    raise BatchError(i, out + [None] * (len(imgs) - i), exc) from exc
            return out
        if stack.shape[0] == 0:
            return []
        if stack.ndim != 3 or stack.shape[1] == 0 or stack.shape[2] == 0:
            raise ValueError("oracle input must be non-empty 2-d grayscale images")
        if stack.min() < 0.0 or stack.max() > 1.0:
            raise ValueError("oracle input values must lie in [0, 1]")
        all_probs = self._probs_batch(stack)
        out = []
        for i in range(stack.shape[0]):
            try:
                out.append(PredictionRecord.from_probs(all_probs[i]))
            except OracleError as exc:
                raise BatchError(i, out + [None] * (stack.shape[0] - i), exc) from exc
        return out

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _probs_batch(self, stack: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class RegionSoftmaxOracle(SyntheticOracle):
    """Each class is keyed to a rectangle; probs = softmax of the per-box
    mean intensities divided by a temperature.

    Boxes are (x0, y0, x1, y1) fractions of the image, one row per class,
    so the same oracle works at any resolution. Lower temperature makes the
    oracle sharper.
    """

    def __init__(self, identity: str, boxes, temperature: float = 1.0):
        super().__init__(identity)
        boxes = np.asarray(boxes, dtype=np.float64)
        if boxes.shape != (N_CLASSES, 4):
            raise ValueError(f"need one (x0,y0,x1,y1) box per class, got {boxes.shape}")
        if (boxes < 0).any() or (boxes > 1).any() \
                or (boxes[:, 0] >= boxes[:, 2]).any() or (boxes[:, 1] >= boxes[:, 3]).any():
            raise ValueError("boxes must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.boxes = boxes
        self.temperature = float(temperature)

    def box_slices(self, width: int, height: int) -> list[tuple[slice, slice]]:
        return [fraction_box_slices(b, width, height) for b in self.boxes]

    def _probs_batch(self, stack: np.ndarray) -> np.ndarray:
        h, w = stack.shape[1:]
        means = np.stack(
            [stack[:, sy, sx].mean(axis=(1, 2)) for sy, sx in self.box_slices(w, h)],
            axis=1,
        )
        logits = means / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


class UniformOracle(SyntheticOracle):
    """Always [1/6] x 6; the argmax tie-break lands on class 0."""

    def _probs_batch(self, stack):
        return np.full((len(stack), N_CLASSES), 1.0 / N_CLASSES)


class ConstantClassOracle(SyntheticOracle):
    """One-hot on a fixed class regardless of input."""

    def __init__(self, identity: str, class_index: int):
        super().__init__(identity)
        if not 0 <= class_index < N_CLASSES:
            raise ValueError(f"class index {class_index} out of range")
        self.class_index = class_index

    def _probs_batch(self, stack):
        probs = np.zeros((len(stack), N_CLASSES))
        probs[:, self.class_index] = 1.0
        return probs


# ---------------------------------------------------------------------------
# external process oracle (fer-oracle/1)

class ExternalOracle:
    """Client for a child process speaking fer-oracle/1 over stdio.

    Newline-delimited JSON; exactly one in-flight request per process. The
    child's first line must be the handshake announcing the protocol and
    the six class names in toolkit order.
    """

    kind = "external_process"

    def __init__(self, command: str, identity: str | None = None,
                 timeout: float = DEFAULT_TIMEOUT):
        self.identity = identity if identity is not None else command
        self.timeout = float(timeout)
        argv = shlex.split(command)
        if not argv:
            raise ValueError("empty oracle command")
        self._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
        )
        self._buf = b""
        self._next_id = 1
        try:
            self._handshake()
        except Exception:
            self.close()
            raise

    def _handshake(self):
        line = self._read_line(time.monotonic() + self.timeout)
        try:
            hello = json.loads(line)
        except json.JSONDecodeError as exc:
            raise OracleError(f"handshake is not JSON: {line!r}") from exc
        if hello.get("protocol") != PROTOCOL:
            raise OracleError(f"unsupported protocol: {hello.get('protocol')!r}")
        if hello.get("classes") != list(EXPRESSIONS):
            raise OracleError(f"class order mismatch: {hello.get('classes')!r}")

    def classify(self, img: np.ndarray) -> PredictionRecord:
        if self._proc is None:
            raise OracleError("oracle is closed")
        u8 = image_to_u8(img)
        h, w = u8.shape
        req_id = self._next_id
        self._next_id += 1
        frame = json.dumps(
            {
                "id": req_id,
                "width": w,
                "height": h,
                "pixels": base64.b64encode(u8.tobytes()).decode("ascii"),
            },
            separators=(",", ":"),
        ).encode("ascii") + b"\n"
        deadline = time.monotonic() + self.timeout
        self._write_all(frame, deadline)
        line = self._read_line(deadline)
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise OracleError(f"response is not JSON: {line[:80]!r}") from exc
        if not isinstance(resp, dict) or "id" not in resp:
            raise OracleError(f"malformed response frame: {line[:80]!r}")
        if resp["id"] != req_id:
            raise OracleError(f"response id {resp['id']} does not match request {req_id}")
        if "error" in resp:
            raise OracleError(f"oracle reported: {resp['error']}")
        if "probs" not in resp or not isinstance(resp["probs"], list):
            raise OracleError("response frame has no probs")
        return PredictionRecord.from_probs(resp["probs"])

    def classify_batch(self, imgs) -> list[PredictionRecord]:
        imgs = list(imgs)
        out = []
        for i, im in enumerate(imgs):
            try:
                out.append(self.classify(im))
            except (OracleError, ValueError) as exc:
                raise BatchError(i, out + [None] * (len(imgs) - i), exc) from exc
        return out

    def _write_all(self, data: bytes, deadline: float):
        fd = self._proc.stdin.fileno()
        os.set_blocking(fd, False)
        view = memoryview(data)
        while view:
            remain = deadline - time.monotonic()
            if remain <= 0:
                raise OracleError(f"timeout after {self.timeout}s writing request")
            _, ready, _ = select.select([], [fd], [], remain)
            if not ready:
                raise OracleError(f"timeout after {self.timeout}s writing request")
            try:
                n = os.write(fd, view)
            except BrokenPipeError as exc:
                raise OracleError("oracle process closed stdin (exited?)") from exc
            view = view[n:]

    def _read_line(self, deadline: float) -> bytes:
        fd = self._proc.stdout.fileno()
        while b"\n" not in self._buf:
            remain = deadline - time.monotonic()
            if remain <= 0:
                raise OracleError(f"timeout after {self.timeout}s waiting for oracle")
            ready, _, _ = select.select([fd], [], [], remain)
            if not ready:
                raise OracleError(f"timeout after {self.timeout}s waiting for oracle")
            chunk = os.read(fd, 1 << 16)
            if not chunk:
                code = self._proc.poll()
                raise OracleError(f"oracle process exited (status {code})")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self):
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        try:
            if proc.stdin:
                proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


# ---------------------------------------------------------------------------
# pooled fan-out

class OraclePool:
    """A pool of identical oracles; batches fan out, results stay in order.

    ``factory`` builds one oracle handle per worker (external processes
    cannot be shared). With size 1 this degrades to plain mapping; outputs
    are independent of the worker count because results are merged by input
    index and any error is reported at its lowest failing index.
    """

    def __init__(self, factory, size: int = 1):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self._oracles = []
        try:
            for _ in range(size):
                self._oracles.append(factory())
        except Exception:
            self.close()
            raise
        self.identity = self._oracles[0].identity

    def classify_batch(self, imgs) -> list[PredictionRecord]:
        imgs = list(imgs)
        if not imgs:
            return []
        if len(self._oracles) == 1:
            return self._oracles[0].classify_batch(imgs)
        results: list = [None] * len(imgs)
        errors: dict[int, Exception] = {}
        cursor = {"i": 0}
        lock = threading.Lock()

        def worker(oracle):
            while True:
                with lock:
                    if errors or cursor["i"] >= len(imgs):
                        return
                    i = cursor["i"]
                    cursor["i"] += 1
                try:
                    rec = oracle.classify(imgs[i])
                except (OracleError, ValueError) as exc:
                    with lock:
                        errors[i] = exc
                    return
                results[i] = rec

        threads = [threading.Thread(target=worker, args=(o,)) for o in self._oracles]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            i = min(errors)
            partial = results[:i] + [None] * (len(imgs) - i)
            raise BatchError(i, partial, errors[i])
        return results

    def classify(self, img: np.ndarray) -> PredictionRecord:
        return self._oracles[0].classify(img)

    def close(self):
        for o in self._oracles:
            try:
                o.close()
            except Exception:
                pass
        self._oracles = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
