"""Synthetic planted-structure datasets, split protocols, and file formats.

Generated samples are Gaussian noise plus, per sample: a class-specific
temporal motif pair (length 3 and length 5, front-loaded, zero-mean over
time) injected at one random onset into every channel, with an independent
random sign per channel community, so within-community content is coherent
while cross-community mixing only adds randomly signed interference; a
shared random offset per community (correlated nuisance that makes the
connectivity structure recoverable); and, when the nonlinearity flag is
set, a per-sample latent z injected along a fixed direction whose sin-sign
carries half the label (label = 2 * motif_class + latent_bit). Signs,
onsets, and the latent construction are arranged so every class has an
identical mean field and a purely affine readout decodes almost nothing.

Motif lengths deliberately match the default kernel set {3, 5}. Tensor files
(".mstf") are magic line + one JSON header line + little-endian row-major
payload, lossless for float64.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, ConfigError, FormatError
from .tensor import Tensor

MSTF_MAGIC = b"MSTF1"
CKPT_MAGIC = b"MSCP1"

_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8"}

# Envelopes are strongly front-loaded so the injected bump (and with it the
# activation of the trained model) concentrates at the onset window itself.
SHORT_MOTIF_LEN = 3
LONG_MOTIF_LEN = 5
_SHORT_ENVELOPE = np.array([2.0, 0.55, 0.35])
_LONG_ENVELOPE = np.array([2.0, 0.60, 0.40, 0.28, 0.18])


# -- synthetic generation --------------------------------------------------


@dataclass
class SynthSpec:
    n_subjects: int = 50
    trials_per_subject: int = 80
    sessions_per_subject: int = 4
    C: int = 16
    S: int = 10
    P: int = 24
    M: int = 4
    seed: int = 7
    communities: int = 2
    noise_scale: float = 1.0
    motif_amp: float = 3.0
    community_scale: float = 0.7
    latent_scale: float = 2.5
    nonlinearity: bool = True
    sign_flips: bool = True

    def __post_init__(self):
        if self.communities < 1 or self.C < self.communities:
            raise ConfigError(f"need 1 <= communities <= C, got {self.communities} vs C={self.C}")
        if self.S < LONG_MOTIF_LEN:
            raise ConfigError(f"S must be >= {LONG_MOTIF_LEN} to hold the long motif, got {self.S}")
        if self.trials_per_subject % self.sessions_per_subject != 0:
            raise ConfigError("trials_per_subject must divide evenly into sessions")
        if self.nonlinearity and self.M % 2 != 0:
            raise ConfigError(f"nonlinearity flag requires an even class count, got M={self.M}")
        if self.M < 1:
            raise ConfigError("M must be positive")

    @property
    def motif_classes(self) -> int:
        return self.M // 2 if self.nonlinearity else self.M


@dataclass
class SynthDataset:
    samples: np.ndarray
    labels: np.ndarray
    meta: dict


def _make_motifs(rng: np.random.Generator, count: int):
    """Per-class (short, long) temporal shapes: front-loaded, zero mean."""
    shorts, longs = [], []
    for _ in range(count):
        for envelope, sink in ((_SHORT_ENVELOPE, shorts), (_LONG_ENVELOPE, longs)):
            signs = rng.choice([-1.0, 1.0], size=envelope.size)
            signs[0] = 1.0
            motif = envelope * signs
            motif = motif - motif.mean()
            sink.append(motif / np.abs(motif).max())
    return np.array(shorts), np.array(longs)


def community_map(channels: int, communities: int) -> np.ndarray:
    """Contiguous partition of channel indices into communities."""
    return (np.arange(channels) * communities) // channels


# Latent interval mixture: bit = 1 draws z from (0, pi) with weight 3/4 and
# from (-2pi, -pi) with weight 1/4; bit = 0 negates the draw. Both conditional
# distributions have mean zero and mirror-matched even moments, so no affine
# readout of z carries the bit, while sign(sin z) equals the bit exactly and
# alternates over four intervals of (-2pi, 2pi).
_LATENT_BASES = np.array([0.0, -2.0 * np.pi])
_LATENT_WEIGHTS = np.array([0.75, 0.25])


def _draw_latent(rng: np.random.Generator, bit: int) -> float:
    base = _LATENT_BASES[rng.choice(len(_LATENT_BASES), p=_LATENT_WEIGHTS)]
    z = base + rng.uniform(0.0, np.pi)
    return z if bit == 1 else -z


def gen_synthetic(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    n_motif = spec.motif_classes
    comm_of_channel = community_map(spec.C, spec.communities)
    comm_members = [np.where(comm_of_channel == g)[0] for g in range(spec.communities)]
    shorts, longs = _make_motifs(rng, n_motif)
    directions = rng.normal(size=(n_motif, spec.P))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    latent_dir = rng.normal(size=spec.P)
    latent_dir /= np.linalg.norm(latent_dir)

    trials_per_session = spec.trials_per_subject // spec.sessions_per_subject
    n_total = spec.n_subjects * spec.trials_per_subject
    samples = np.zeros((n_total, spec.C, spec.S, spec.P))
    labels = np.zeros(n_total, dtype=np.int64)
    subjects = np.zeros(n_total, dtype=np.int64)
    sessions = np.zeros(n_total, dtype=np.int64)
    trials = np.zeros(n_total, dtype=np.int64)
    onsets = np.zeros(n_total, dtype=np.int64)
    motif_class_ids = np.zeros(n_total, dtype=np.int64)

    onset_max = spec.S - LONG_MOTIF_LEN
    shapes = np.zeros((n_motif, spec.S))
    for m in range(n_motif):
        shapes[m, :LONG_MOTIF_LEN] = longs[m]
        shapes[m, :SHORT_MOTIF_LEN] += shorts[m]
    i = 0
    for subject in range(1, spec.n_subjects + 1):
        # Balanced within each subject (+-1): cycle the classes, then shuffle
        # within each session so trial order carries no label information.
        subject_labels = np.tile(np.arange(spec.M), spec.trials_per_subject // spec.M + 1)
        subject_labels = subject_labels[:spec.trials_per_subject]
        for session in range(spec.sessions_per_subject):
            block = subject_labels[session * trials_per_session:(session + 1) * trials_per_session].copy()
            rng.shuffle(block)
            for trial, label in enumerate(block):
                motif_class = label // 2 if spec.nonlinearity else label
                x = rng.normal(0.0, spec.noise_scale, (spec.C, spec.S, spec.P)) \
                    if spec.noise_scale > 0 else np.zeros((spec.C, spec.S, spec.P))
                onset = int(rng.integers(0, onset_max + 1))
                field = np.roll(shapes[motif_class], onset)
                bump = spec.motif_amp * field[:, None] * directions[motif_class][None, :]
                for g in range(spec.communities):
                    if spec.community_scale > 0:
                        offset = rng.normal(0.0, spec.community_scale, spec.P)
                        x[comm_members[g]] += offset[None, None, :]
                    # equiprobable sign keeps every class's mean field at zero
                    sign = float(rng.choice([-1.0, 1.0])) if spec.sign_flips else 1.0
                    x[comm_members[g]] += sign * bump[None]
                if spec.nonlinearity:
                    # sign(sin z) equals the assigned label's low bit, so the
                    # per-subject class balance stays exact.
                    z = _draw_latent(rng, label % 2)
                    x += spec.latent_scale * z * latent_dir[None, None, :]
                samples[i] = x
                labels[i] = label
                subjects[i] = subject
                sessions[i] = session
                trials[i] = trial
                onsets[i] = onset
                motif_class_ids[i] = motif_class
                i += 1

    meta = {
        "n_samples": n_total,
        "M": spec.M,
        "C": spec.C,
        "S": spec.S,
        "P": spec.P,
        "subjects": subjects.tolist(),
        "sessions": sessions.tolist(),
        "trials": trials.tolist(),
        "shapes": {"samples": list(samples.shape), "labels": [n_total]},
        "onsets": onsets.tolist(),
        "motif_classes": motif_class_ids.tolist(),
        "community_map": comm_of_channel.tolist(),
        "spec": asdict(spec),
    }
    return SynthDataset(samples, labels, meta)


# -- split protocols ---------------------------------------------------------


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    protocol: str


def split_dataset(meta: dict, protocol: str, ratios) -> DatasetSplit:
    """Partition sample indices.

    subject_wise: `ratios` are subject counts (train, val, test) summing to
    the subject population; each split takes a contiguous range of sorted
    subject ids. within_session: `ratios` are trial counts summing to the
    trials in every (subject, session) group, assigned in trial order.
    """
    ratios = tuple(int(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be three nonnegative counts, got {ratios}")
    subjects = np.asarray(meta["subjects"])
    sessions = np.asarray(meta["sessions"])
    trials = np.asarray(meta["trials"])

    if protocol == "subject_wise":
        unique = np.unique(subjects)
        if sum(ratios) != unique.size:
            raise ConfigError(f"subject counts {ratios} do not sum to {unique.size} subjects")
        bounds = np.cumsum(ratios)
        groups = (unique[:bounds[0]], unique[bounds[0]:bounds[1]], unique[bounds[1]:bounds[2]])
        parts = [np.where(np.isin(subjects, g))[0] for g in groups]
    elif protocol == "within_session":
        parts = [[], [], []]
        for subject in np.unique(subjects):
            for session in np.unique(sessions[subjects == subject]):
                mask = (subjects == subject) & (sessions == session)
                idx = np.where(mask)[0]
                idx = idx[np.argsort(trials[idx], kind="stable")]
                if sum(ratios) != idx.size:
                    raise ConfigError(
                        f"trial counts {ratios} do not sum to {idx.size} trials "
                        f"in subject {subject}, session {session}")
                bounds = np.cumsum(ratios)
                parts[0].append(idx[:bounds[0]])
                parts[1].append(idx[bounds[0]:bounds[1]])
                parts[2].append(idx[bounds[1]:bounds[2]])
        parts = [np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in parts]
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")

    return DatasetSplit(np.sort(parts[0]), np.sort(parts[1]), np.sort(parts[2]), protocol)


# -- tensor files ------------------------------------------------------------


def write_tensor(path, tensor, name: str = "tensor", dtype: str = "f8") -> None:
    """Write one tensor: magic line, JSON header line, little-endian payload."""
    if dtype not in _DTYPES:
        raise ConfigError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    header = json.dumps({"dtype": dtype, "shape": list(arr.shape), "name": name},
                        sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(MSTF_MAGIC + b"\n")
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes())


def read_tensor(path, with_header: bool = False):
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != MSTF_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0; expected {MSTF_MAGIC.decode()!r}")
        header_line = fh.readline()
        offset = len(magic) + 1 + len(header_line)
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unparseable header at offset {len(magic) + 1}: {exc}") from exc
        for key in ("dtype", "shape", "name"):
            if key not in header:
                raise FormatError(f"header missing key {key!r}")
        if header["dtype"] not in _DTYPES:
            raise FormatError(f"unsupported dtype {header['dtype']!r} in header")
        np_dtype = np.dtype(_DTYPES[header["dtype"]])
        shape = tuple(int(s) for s in header["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        payload = fh.read()
        if len(payload) != expected:
            raise FormatError(
                f"payload length {len(payload)} != expected {expected} bytes at offset {offset}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return (arr, header) if with_header else arr


# -- datasets on disk --------------------------------------------------------


def save_dataset(dirpath, dataset: SynthDataset) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    write_tensor(dirpath / "samples.mstf", dataset.samples, name="samples", dtype="f8")
    write_tensor(dirpath / "labels.mstf", dataset.labels, name="labels", dtype="i8")
    (dirpath / "meta.json").write_text(json.dumps(dataset.meta, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")


def load_dataset(dirpath) -> SynthDataset:
    dirpath = Path(dirpath)
    for required in ("samples.mstf", "labels.mstf", "meta.json"):
        if not (dirpath / required).exists():
            raise FormatError(f"dataset directory missing {required}")
    samples = read_tensor(dirpath / "samples.mstf")
    labels = read_tensor(dirpath / "labels.mstf").astype(np.int64)
    meta = json.loads((dirpath / "meta.json").read_text(encoding="utf-8"))
    return SynthDataset(samples, labels, meta)


# -- checkpoints --------------------------------------------------------------


def _collect_checkpoint_tensors(model, optimizer=None):
    named = [("param." + n, p.data) for n, p in model.named_parameters()]
    named += [("buffer." + n, b) for n, b in model.named_buffers()]
    if optimizer is not None:
        named += [("opt." + n, b) for n, b in optimizer.named_state()]
    return named


def save_checkpoint(path, model, optimizer=None, epoch: int = 0, val_kappa: float = 0.0) -> None:
    """Persist model parameters, norm buffers, and optimizer state bit-exactly."""
    named = _collect_checkpoint_tensors(model, optimizer)
    header = {
        "config": asdict(model.cfg),
        "config_hash": model.cfg.config_hash(),
        "epoch": int(epoch),
        "val_kappa": float(val_kappa),
        "tensors": [{"name": n, "dtype": "f8", "shape": list(np.asarray(a).shape)}
                    for n, a in named],
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, arr in named:
            fh.write(np.ascontiguousarray(np.asarray(arr, dtype="<f8")).tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0; expected {CKPT_MAGIC.decode()!r}")
        return json.loads(fh.readline().decode("utf-8"))


def load_checkpoint(path, model, optimizer=None) -> dict:
    """Restore state saved by save_checkpoint; returns the header."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0; expected {CKPT_MAGIC.decode()!r}")
        header_line = fh.readline()
        offset = len(magic) + 1 + len(header_line)
        header = json.loads(header_line.decode("utf-8"))
        if header["config_hash"] != model.cfg.config_hash():
            raise CompatibilityError(
                f"checkpoint config hash {header['config_hash']} does not match "
                f"model config hash {model.cfg.config_hash()}")
        loaded = {}
        for entry in header["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise FormatError(f"truncated payload for {entry['name']} at offset {offset}")
            offset += nbytes
            loaded[entry["name"]] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()

    for name, p in model.named_parameters():
        key = "param." + name
        if key not in loaded:
            raise CompatibilityError(f"checkpoint missing parameter {name}")
        if loaded[key].shape != p.data.shape:
            raise CompatibilityError(f"parameter {name}: shape {loaded[key].shape} != {p.data.shape}")
        p.data[...] = loaded[key]
    for name, b in model.named_buffers():
        key = "buffer." + name
        if key not in loaded:
            raise CompatibilityError(f"checkpoint missing buffer {name}")
        b[...] = loaded[key]
    if optimizer is not None:
        opt_state = {k[len("opt."):]: v for k, v in loaded.items() if k.startswith("opt.")}
        if opt_state:
            optimizer.load_state(opt_state)
    return header


def build_model_from_checkpoint(path):
    """Construct a model from the embedded config and load its state."""
    from .model import ModelConfig, MscgcKanModel

    header = read_checkpoint_header(path)
    cfg = ModelConfig(**header["config"])
    model = MscgcKanModel(cfg)
    load_checkpoint(path, model)
    return model, header
