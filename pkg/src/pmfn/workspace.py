"""On-disk volume layout: ``manifest.json`` plus one PFM per image.

Manifest schema::

    {
      "n_locations": int, "n_repeats": int, "shape": [H, W],
      "stages": {stage: {key: relative path}},
      "fingerprints": {stage: hex digest of the inputs that produced it},
      "checkpoints": {name: relative path},
      "normalization": {"lo": float, "hi": float},
      "config_hash": str
    }

Stage keys are ``"i:j"`` for per-frame stages (``hn``, ``pre``) and ``"i"``
otherwise. Images live at ``<root>/<stage>/<key with ':' -> '_'>.pfm``.
Stages: ``hn`` raw frames, ``clean`` phantom ground truth (metrics only),
``pre`` cropped/padded frames, ``ln`` frame averages, ``sf`` self-fusion of
``ln``, ``pseudo`` network-predicted self-fusion, ``grad`` its Sobel
magnitude, ``out`` fusion-network output, ``out_baseline`` single-input
network output.
"""

import hashlib
import json
import os

from .errors import StageDependencyError, ValidationError
from .pfm import read_pfm, write_pfm

FRAME_STAGES = ("hn", "pre")
STAGES = ("hn", "clean", "pre", "ln", "sf", "pseudo", "grad", "out", "out_baseline")


def frame_key(i, j):
    return f"{i}:{j}"


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class Workspace:
    """A volume directory. Reads are logged in ``access_log`` as
    ``(active stage, stage read, key)`` so tests can audit data flow.
    """

    def __init__(self, root, manifest):
        self.root = os.path.abspath(root)
        self.manifest = manifest
        self.access_log = []
        self.active_stage = None

    @classmethod
    def create(cls, root, n_locations, n_repeats, shape):
        os.makedirs(root, exist_ok=True)
        manifest = {
            "n_locations": int(n_locations),
            "n_repeats": int(n_repeats),
            "shape": [int(shape[0]), int(shape[1])],
            "stages": {},
            "fingerprints": {},
            "checkpoints": {},
            "config_hash": "",
        }
        ws = cls(root, manifest)
        ws.save()
        return ws

    @classmethod
    def open(cls, path):
        """Open a workspace from its directory or its ``manifest.json``."""
        root = os.path.dirname(path) if path.endswith(".json") else path
        mpath = os.path.join(root, "manifest.json")
        if not os.path.isfile(mpath):
            raise ValidationError(f"no manifest.json at {root}")
        with open(mpath) as f:
            manifest = json.load(f)
        for k in ("n_locations", "n_repeats", "stages"):
            if k not in manifest:
                raise ValidationError(f"{mpath}: missing key {k!r}")
        manifest.setdefault("fingerprints", {})
        manifest.setdefault("checkpoints", {})
        return cls(root, manifest)

    @property
    def n_locations(self):
        return self.manifest["n_locations"]

    @property
    def n_repeats(self):
        return self.manifest["n_repeats"]

    @property
    def manifest_path(self):
        return os.path.join(self.root, "manifest.json")

    def save(self):
        tmp = self.manifest_path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, self.manifest_path)

    def keys(self, stage):
        if stage in FRAME_STAGES:
            return [frame_key(i, j) for i in range(self.n_locations) for j in range(self.n_repeats)]
        return [str(i) for i in range(self.n_locations)]

    def path(self, stage, key):
        return os.path.join(self.root, stage, f"{key.replace(':', '_')}.pfm")

    def has_stage(self, stage):
        entries = self.manifest["stages"].get(stage, {})
        return all(k in entries and os.path.isfile(os.path.join(self.root, entries[k]))
                   for k in self.keys(stage))

    def require(self, stage, hint):
        if not self.has_stage(stage):
            raise StageDependencyError(f"{self.root}: stage {stage!r} is missing or incomplete; "
                                       f"{hint}")

    def read(self, stage, key):
        key = str(key)
        self.access_log.append((self.active_stage, stage, key))
        rel = self.manifest["stages"].get(stage, {}).get(key)
        if rel is None:
            raise StageDependencyError(f"{self.root}: no {stage!r} image for key {key}")
        return read_pfm(os.path.join(self.root, rel))

    def write(self, stage, key, img):
        key = str(key)
        p = self.path(stage, key)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        write_pfm(p, img)
        self.manifest["stages"].setdefault(stage, {})[key] = os.path.relpath(p, self.root)

    def drop_stage(self, stage):
        self.manifest["stages"].pop(stage, None)
        self.manifest["fingerprints"].pop(stage, None)

    def stage_digest(self, stage):
        """Content hash of every file in a stage, in key order."""
        entries = self.manifest["stages"].get(stage, {})
        return digest([[k, file_digest(os.path.join(self.root, entries[k]))]
                       for k in self.keys(stage)])

    def is_current(self, stage, fingerprint):
        return self.manifest["fingerprints"].get(stage) == fingerprint and self.has_stage(stage)

    def checkpoint_path(self, name):
        rel = self.manifest["checkpoints"].get(name)
        return None if rel is None else os.path.join(self.root, rel)
