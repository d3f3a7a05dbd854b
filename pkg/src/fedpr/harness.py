"""Experiment driver: configuration, seeding, modes, result persistence.

Three training modes share one code path:

* ``fedpr``       -- shared trunk + shared head aggregated, personalized
                     head kept local, statistic mixing on, full loss stack.
* ``fedavg``      -- ablation: every parameter is shared and aggregated,
                     mixing disabled (coefficient pinned to 1) and only the
                     personalized cross-entropy trained.
* ``centralized`` -- all client data pooled into a single participant and
                     trained with the full loss stack; implemented as a
                     one-client federation, which makes it bitwise
                     identical to a K=1 ``fedpr`` run by construction.

Every result file is a deterministic function of (config, seeds); only the
wall-clock fields of the round history vary between reruns.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, PartitionError
from .federation import (
    ClientState,
    PartitionedParams,
    RoundConfig,
    RoundReport,
    run_federation,
)
from .metrics import EvalMatrix, EvalResult, cross_eval
from .model import ForgeryModel, LossWeights
from .synthdata import ClientData, SyntheticSpec, generate, read_dataset

Array = np.ndarray

MODES = ("fedpr", "fedavg", "centralized")

_CKPT_MAGIC = b"FPCK"
_CKPT_VERSION = 1

# Spawn keys of the per-run random streams; synthetic data itself uses
# keys (0,) and (1, k) on the data seed inside synthdata.
_KEY_SHARED_INIT = (2, 0)
_KEY_CLIENT_INIT = 3
_KEY_CLIENT_TRAIN = 4
_KEY_SERVER = (5, 0)


@dataclass
class ExperimentConfig:
    mode: str = "fedpr"
    data: SyntheticSpec | str = field(default_factory=SyntheticSpec)
    round: RoundConfig = field(default_factory=RoundConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if isinstance(self.data, SyntheticSpec):
            self.data.validate()
        self.round.validate()

    def to_json_dict(self) -> dict:
        data = (
            {"path": self.data}
            if isinstance(self.data, str)
            else {"synthetic": dataclasses.asdict(self.data)}
        )
        round_dict = dataclasses.asdict(self.round)
        return {
            "mode": self.mode,
            "data": data,
            "round": round_dict,
            "seeds": list(self.seeds),
            "output_dir": str(self.output_dir),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ExperimentConfig":
        try:
            data_obj = obj.get("data", {})
            if "path" in data_obj:
                data: SyntheticSpec | str = data_obj["path"]
            else:
                spec_dict = dict(data_obj.get("synthetic", {}))
                if "image_size" in spec_dict:
                    spec_dict["image_size"] = tuple(spec_dict["image_size"])
                data = SyntheticSpec(**spec_dict)
            round_dict = dict(obj.get("round", {}))
            if "weights" in round_dict:
                round_dict["weights"] = LossWeights(**round_dict["weights"])
            cfg = cls(
                mode=obj.get("mode", "fedpr"),
                data=data,
                round=RoundConfig(**round_dict),
                seeds=[int(s) for s in obj.get("seeds", [0])],
                output_dir=obj.get("output_dir", "runs"),
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from exc
        cfg.validate()
        return cfg


@dataclass
class SeedOutcome:
    seed: int
    history: list[RoundReport]
    matrix: EvalMatrix
    clients: list[ClientState]
    out_dir: Path


def _canonical_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def report_to_dict(report: RoundReport) -> dict:
    return {
        "round": report.round_index,
        "loss_total": report.mean_total_loss,
        "loss_personalized": report.mean_loss_personalized,
        "loss_shared": report.mean_loss_shared,
        "loss_adversarial": report.mean_loss_adversarial,
        "clients": [
            {
                "id": cid,
                "accuracy": ev.accuracy,
                "auc": ev.auc,
                "eer": ev.eer,
                "n": ev.n_samples,
            }
            for cid, ev in sorted(report.client_evals.items())
        ],
        "wall_clock_ms": report.wall_clock_ms,
    }


def matrix_to_csv(matrix: EvalMatrix) -> str:
    k = matrix.size
    lines = ["train\\test," + ",".join(f"test_{j}" for j in range(k))]
    for i, row in enumerate(matrix.entries):
        lines.append(f"train_{i}," + ",".join(f"{cell.accuracy:.4f}" for cell in row))
    return "\n".join(lines) + "\n"


def dataset_for_run(cfg: ExperimentConfig, seed: int) -> list[ClientData]:
    """Materialize the per-client data for one run seed.

    Synthetic data is regenerated with the run seed; file-backed data is
    fixed and only the training streams vary per seed.
    """
    if isinstance(cfg.data, str):
        data = read_dataset(cfg.data)
    else:
        data = generate(dataclasses.replace(cfg.data, seed=seed))
    if cfg.mode == "centralized":
        merged = ClientData(client_id=0)
        for cd in data:
            merged.train.extend(cd.train)
            merged.test.extend(cd.test)
        data = [merged]
    return data


def resolved_round_config(cfg: ExperimentConfig) -> RoundConfig:
    if cfg.mode == "fedavg":
        return dataclasses.replace(
            cfg.round,
            force_lambda=1.0,
            weights=LossWeights(alpha=0.0, beta=1.0, gamma=0.0),
        )
    return cfg.round


def build_clients(
    cfg: ExperimentConfig, seed: int, data: list[ClientData]
) -> tuple[list[ClientState], np.random.Generator]:
    """Construct clients with a common shared-parameter initialization.

    Shared parameters come from one template model (a dedicated stream of
    the run seed) so every client starts from the same global state;
    personalized parameters are drawn from each client's own stream.
    """
    in_channels = data[0].train[0].image.data.shape[0]
    template = ForgeryModel(
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=_KEY_SHARED_INIT)),
        in_channels=in_channels,
    )
    clients = []
    for cd in data:
        model = ForgeryModel(
            np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(_KEY_CLIENT_INIT, cd.client_id))
            ),
            in_channels=in_channels,
        )
        partition = (
            PartitionedParams.all_shared(model)
            if cfg.mode == "fedavg"
            else PartitionedParams.default_for(model)
        )
        for name in partition.shared:
            model.params[name].value.data[...] = template.params[name].value.data
        clients.append(
            ClientState(
                client_id=cd.client_id,
                model=model,
                dataset=cd,
                rng=np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(_KEY_CLIENT_TRAIN, cd.client_id))
                ),
                partition=partition,
            )
        )
    server_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=_KEY_SERVER))
    return clients, server_rng


def run_single_seed(
    cfg: ExperimentConfig,
    seed: int,
    out_dir: Path,
    n_workers: int | None = None,
    message_sink=None,
) -> SeedOutcome:
    """One full run: train, cross-evaluate, persist the result bundle."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create output directory {out_dir}: {exc}") from exc

    data = dataset_for_run(cfg, seed)
    round_cfg = resolved_round_config(cfg)
    clients, server_rng = build_clients(cfg, seed, data)
    history = run_federation(
        clients, round_cfg, server_rng, n_workers=n_workers, message_sink=message_sink
    )
    matrix = cross_eval(clients)

    (out_dir / "history.jsonl").write_text(
        "".join(_canonical_line(report_to_dict(r)) + "\n" for r in history)
    )
    (out_dir / "matrix.csv").write_text(matrix_to_csv(matrix))
    echo = ExperimentConfig(
        mode=cfg.mode,
        data=cfg.data,
        round=round_cfg,
        seeds=[seed],
        output_dir=str(out_dir),
    )
    (out_dir / "config.json").write_text(
        json.dumps(echo.to_json_dict(), sort_keys=True, indent=2) + "\n"
    )
    save_checkpoint(
        out_dir / "checkpoint.fpck", clients, server_rng, next_round=round_cfg.rounds
    )
    return SeedOutcome(seed=seed, history=history, matrix=matrix, clients=clients, out_dir=out_dir)


def run_experiment(
    cfg: ExperimentConfig, n_workers: int | None = None, message_sink=None
) -> list[SeedOutcome]:
    """Run every seed and write the aggregate summary.

    A single-seed experiment writes its bundle directly into the output
    directory; with several seeds each run gets a ``seed_<s>`` directory.
    """
    cfg.validate()
    root = Path(cfg.output_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create output directory {root}: {exc}") from exc

    outcomes = []
    for seed in cfg.seeds:
        out_dir = root if len(cfg.seeds) == 1 else root / f"seed_{seed}"
        outcomes.append(
            run_single_seed(cfg, seed, out_dir, n_workers=n_workers, message_sink=message_sink)
        )

    per_seed = []
    for oc in outcomes:
        final = oc.history[-1].client_evals if oc.history else {}
        accs = [ev.accuracy for ev in final.values()]
        aucs = [ev.auc for ev in final.values()]
        eers = [ev.eer for ev in final.values()]
        per_seed.append(
            {
                "seed": oc.seed,
                "self_accuracy": float(np.mean(accs)) if accs else None,
                "self_auc": float(np.mean(aucs)) if aucs else None,
                "self_eer": float(np.mean(eers)) if eers else None,
            }
        )
    summary = {
        "mode": cfg.mode,
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
    }
    for key in ("self_accuracy", "self_auc", "self_eer"):
        values = [row[key] for row in per_seed if row[key] is not None]
        summary[f"{key}_mean"] = float(np.mean(values)) if values else None
        summary[f"{key}_std"] = float(np.std(values)) if values else None
    (root / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return outcomes


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: magic "FPCK", u32 version, u64 manifest length, canonical JSON
# manifest, then per client and per parameter (manifest order) the value
# and velocity buffers as little-endian float64.


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state

def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    if state.get("bit_generator") != rng.bit_generator.state.get("bit_generator"):
        raise FormatError(f"unsupported rng kind {state.get('bit_generator')!r}")
    rng.bit_generator.state = state
    return rng


def save_checkpoint(
    path,
    clients: Sequence[ClientState],
    server_rng: np.random.Generator,
    next_round: int,
) -> None:
    manifest = {
        "version": _CKPT_VERSION,
        "next_round": next_round,
        "server_rng": _rng_state(server_rng),
        "model": {
            "in_channels": clients[0].model.in_channels,
            "num_classes": clients[0].model.num_classes,
            "hidden_channels": list(clients[0].model.hidden_channels),
        },
        "clients": [
            {
                "id": c.client_id,
                "rng": _rng_state(c.rng),
                "partition": {
                    "shared": sorted(c.partition.shared),
                    "personalized": sorted(c.partition.personalized),
                },
                "params": [
                    {
                        "name": name,
                        "shape": list(p.value.data.shape),
                        "role": "shared" if name in c.partition.shared else "personalized",
                    }
                    for name, p in c.model.params.items()
                ],
            }
            for c in clients
        ],
    }
    manifest_bytes = _canonical_line(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(manifest_bytes)))
        fh.write(manifest_bytes)
        for c in clients:
            for p in c.model.params.values():
                fh.write(p.value.data.astype("<f8").tobytes())
                fh.write(p.velocity.astype("<f8").tobytes())


def load_checkpoint(
    path,
    datasets: Sequence[ClientData],
    partition: PartitionedParams | None = None,
) -> tuple[list[ClientState], np.random.Generator, int]:
    """Rebuild clients and the server rng from a checkpoint file.

    ``datasets`` supplies the private data (never stored in checkpoints),
    matched to clients by position.  When ``partition`` is given it must
    agree with the stored scheme.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_CKPT_MAGIC!r}")
    version, manifest_len = struct.unpack("<IQ", blob[4:16])
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(blob[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}") from exc

    if len(manifest["clients"]) != len(datasets):
        raise FormatError(
            f"checkpoint holds {len(manifest['clients'])} clients, got {len(datasets)} datasets"
        )
    arch = manifest["model"]
    pos = 16 + manifest_len
    clients = []
    for entry, dataset in zip(manifest["clients"], datasets):
        stored = PartitionedParams(
            shared=frozenset(entry["partition"]["shared"]),
            personalized=frozenset(entry["partition"]["personalized"]),
        )
        if partition is not None and partition != stored:
            raise PartitionError(
                f"checkpoint partition {entry['partition']} does not match the requested scheme"
            )
        model = ForgeryModel(
            np.random.default_rng(0),
            in_channels=arch["in_channels"],
            num_classes=arch["num_classes"],
            hidden_channels=tuple(arch["hidden_channels"]),
        )
        if [p["name"] for p in entry["params"]] != list(model.params):
            raise FormatError(f"checkpoint parameter set differs for client {entry['id']}")
        for meta in entry["params"]:
            param = model.params[meta["name"]]
            shape = tuple(meta["shape"])
            if param.value.data.shape != shape:
                raise FormatError(
                    f"parameter {meta['name']!r} has shape {shape}, expected {param.value.data.shape}"
                )
            count = int(np.prod(shape)) * 8
            if pos + 2 * count > len(blob):
                raise FormatError(f"checkpoint truncated in parameter {meta['name']!r}")
            param.value.data[...] = np.frombuffer(blob[pos : pos + count], dtype="<f8").reshape(shape)
            pos += count
            param.velocity[...] = np.frombuffer(blob[pos : pos + count], dtype="<f8").reshape(shape)
            pos += count
        clients.append(
            ClientState(
                client_id=entry["id"],
                model=model,
                dataset=dataset,
                rng=_restore_rng(entry["rng"]),
                partition=stored,
            )
        )
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after checkpoint payload")
    return clients, _restore_rng(manifest["server_rng"]), int(manifest["next_round"])
