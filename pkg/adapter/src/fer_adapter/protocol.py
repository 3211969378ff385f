"""Server side of the fer-oracle/1 stdio protocol.

The protocol is newline-delimited JSON over stdin/stdout.  The first line
the server emits is a handshake naming the protocol and the six expression
classes in canonical order:

    {"protocol": "fer-oracle/1", "classes": ["anger", ..., "surprise"]}

Each subsequent request frame

    {"id": <int>, "width": <int>, "height": <int>, "pixels": "<base64>"}

carries one grayscale image as row-major unsigned bytes and is answered by
exactly one response frame with the same id, either

    {"id": <int>, "probs": [p0, p1, p2, p3, p4, p5]}

or, when the request or the model output is unusable,

    {"id": <int-or-null>, "error": "<message>"}.

Errors are per-frame: the loop keeps serving after reporting one.  The
server handles one request at a time; callers that want parallelism run
several adapter processes.
"""

from __future__ import annotations

import base64
import binascii
import json
import sys

import numpy as np

PROTOCOL = "fer-oracle/1"
CLASSES = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")

# Smallest total probability mass accepted before renormalization; anything
# at or below this is indistinguishable from an all-zero output.
PROB_EPS = 1e-12


class ProtocolError(ValueError):
    """A request frame violates fer-oracle/1."""


def decode_frame(request: object) -> np.ndarray:
    """Validate a request frame and return its image as float64 in [0, 1].

    Raises ProtocolError on any malformed field.  The "id" value itself is
    not validated here - it is echoed back verbatim by the serve loop.
    """
    if not isinstance(request, dict):
        raise ProtocolError("request frame must be a JSON object")
    if "id" not in request:
        raise ProtocolError("request frame is missing 'id'")
    for key in ("width", "height"):
        value = request.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            raise ProtocolError(f"request field '{key}' must be a positive integer")
    width = request["width"]
    height = request["height"]
    pixels = request.get("pixels")
    if not isinstance(pixels, str):
        raise ProtocolError("request field 'pixels' must be a base64 string")
    try:
        raw = base64.b64decode(pixels, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ProtocolError(f"request pixels are not valid base64: {exc}") from exc
    if len(raw) != width * height:
        raise ProtocolError(
            f"request pixels hold {len(raw)} bytes, expected {width * height}"
        )
    flat = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    return flat.reshape(height, width) / 255.0


def renormalize(raw: object) -> np.ndarray:
    """Map a backend output vector onto the probability simplex.

    Negative entries are clipped to zero, then the vector is scaled to sum
    to one.  Non-finite values and vectors without positive mass raise
    ValueError so the serve loop can report them as error frames instead of
    emitting garbage probabilities.
    """
    vec = np.asarray(raw, dtype=np.float64).ravel()
    if vec.size != len(CLASSES):
        raise ValueError(f"model produced {vec.size} outputs, expected {len(CLASSES)}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("model produced non-finite outputs")
    vec = np.clip(vec, 0.0, None)
    mass = float(vec.sum())
    if mass <= PROB_EPS:
        raise ValueError("model produced no positive probability mass")
    return vec / mass


def serve(backend, stdin=None, stdout=None) -> int:
    """Run the fer-oracle/1 request loop until stdin closes.

    `backend` needs a single method probs(image) -> length-6 array-like.
    Returns 0; per-frame failures are reported in-band as error frames.
    """
    if stdin is None:
        stdin = sys.stdin
    if stdout is None:
        stdout = sys.stdout

    handshake = {"protocol": PROTOCOL, "classes": list(CLASSES)}
    stdout.write(json.dumps(handshake, separators=(",", ":")) + "\n")
    stdout.flush()

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        request_id = None
        try:
            request = json.loads(line)
            if isinstance(request, dict):
                request_id = request.get("id")
            image = decode_frame(request)
            probs = renormalize(backend.probs(image))
            frame = {"id": request_id, "probs": [float(p) for p in probs]}
        except Exception as exc:  # per-frame: report and keep serving
            message = str(exc) or exc.__class__.__name__
            frame = {"id": request_id, "error": message}
        stdout.write(json.dumps(frame, separators=(",", ":")) + "\n")
        stdout.flush()
    return 0
