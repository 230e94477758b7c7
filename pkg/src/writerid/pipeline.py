"""Stage orchestration over on-disk artifacts.

Stages (in order): binarize, patches, train-cnn, features, whiten,
train-gmm, encode, evaluate. Each stage writes its outputs atomically
under the configured output directory together with a run manifest
(config hash, seed, input/output hashes), so any stage can be re-run or
audited in isolation. Per-document work is independent and may run on
several threads (--jobs); artifact content does not depend on the
thread count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from writerid import cnn, encoding, gmm, imaging, retrieval, serialization, whitening
from writerid.config import PipelineConfig, config_hash
from writerid.manifest import DocumentEntry, parse_manifest

logger = logging.getLogger(__name__)

STAGES = (
    "binarize",
    "patches",
    "train-cnn",
    "features",
    "whiten",
    "train-gmm",
    "encode",
    "evaluate",
)


class StageError(RuntimeError):
    """A stage cannot run; the message names what to do first."""


def derive_seed(root_seed: int, *labels: str) -> int:
    """Stage-specific RNG seed: stage labels hashed into the root seed.

    Keeps stage reruns deterministic regardless of execution order.
    """
    material = f"{root_seed}|" + "|".join(labels)
    digest = hashlib.sha256(material.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Pipeline:
    def __init__(self, config: PipelineConfig, jobs: int = 1):
        self.config = config
        self.out = Path(config.output_dir)
        self.jobs = max(1, jobs)
        self._train_entries: list[DocumentEntry] | None = None
        self._test_entries: list[DocumentEntry] | None = None

    # ---------------------------------------------------------------- paths

    def binarized_path(self, key: str) -> Path:
        return self.out / "binarized" / f"{key}.png"

    def patches_path(self, key: str) -> Path:
        return self.out / "patches" / f"{key}.cafv"

    def features_path(self, key: str) -> Path:
        return self.out / "features" / f"{key}.cafv"

    def descriptor_path(self, key: str) -> Path:
        return self.out / "descriptors" / f"{key}.senc"

    @property
    def cnn_path(self) -> Path:
        return Path(self.config.models.cnn) if self.config.models.cnn else self.out / "cnn.scnn"

    @property
    def whitening_path(self) -> Path:
        return (
            Path(self.config.models.whitening)
            if self.config.models.whitening
            else self.out / "whitening.swht"
        )

    @property
    def gmm_path(self) -> Path:
        return Path(self.config.models.gmm) if self.config.models.gmm else self.out / "gmm.sgmm"

    @property
    def kmeans_path(self) -> Path:
        return (
            Path(self.config.models.kmeans)
            if self.config.models.kmeans
            else self.out / "kmeans.skms"
        )

    # ------------------------------------------------------------- manifests

    def train_entries(self) -> list[DocumentEntry]:
        if self._train_entries is None:
            self._train_entries = parse_manifest(
                self.config.train_manifest, self.config.id_pattern
            )
        return self._train_entries

    def test_entries(self) -> list[DocumentEntry]:
        if self._test_entries is None:
            self._test_entries = parse_manifest(self.config.test_manifest, self.config.id_pattern)
        return self._test_entries

    def all_entries(self) -> list[DocumentEntry]:
        merged: dict[str, DocumentEntry] = {}
        for entry in self.train_entries() + self.test_entries():
            known = merged.get(entry.key)
            if known is not None and known.path != entry.path:
                raise StageError(
                    f"document key {entry.key} maps to both {known.path} and {entry.path}"
                )
            merged.setdefault(entry.key, entry)
        return sorted(merged.values(), key=lambda e: e.key)

    # --------------------------------------------------------------- helpers

    def _require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise StageError(f"missing artifact {path}; run stage '{producer}' first")
        return path

    def _map_docs(self, fn, items) -> None:
        items = list(items)
        if self.jobs == 1 or len(items) <= 1:
            for item in items:
                fn(item)
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                list(pool.map(fn, items))

    def _write_run_manifest(self, stage: str, inputs: list[Path], outputs: list[Path]) -> None:
        manifest = {
            "stage": stage,
            "config_hash": config_hash(self.config),
            "seed": self.config.seed,
            "inputs": {str(p): _sha256(p) for p in sorted(set(inputs))},
            "outputs": {str(p): _sha256(p) for p in sorted(set(outputs))},
        }
        path = self.out / "manifests" / f"{stage}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(manifest, indent=2, sort_keys=True).encode() + b"\n"
        serialization.atomic_write_bytes(path, payload)

    def _load_mask(self, entry: DocumentEntry) -> tuple[np.ndarray, np.ndarray]:
        img = imaging.load_gray_image(entry.path)
        mask = imaging.binarize(img, invert=self.config.patches.invert_ink)
        return img, mask

    # ---------------------------------------------------------------- stages

    def stage_binarize(self) -> list[Path]:
        entries = self.all_entries()
        (self.out / "binarized").mkdir(parents=True, exist_ok=True)

        def work(entry: DocumentEntry):
            _, mask = self._load_mask(entry)
            imaging.save_binary_png(mask, self.binarized_path(entry.key))

        self._map_docs(work, entries)
        outputs = [self.binarized_path(e.key) for e in entries]
        self._write_run_manifest("binarize", [e.path for e in entries], outputs)
        return outputs

    def stage_patches(self) -> list[Path]:
        entries = self.all_entries()
        (self.out / "patches").mkdir(parents=True, exist_ok=True)
        p = self.config.patches

        def work(entry: DocumentEntry):
            img, mask = self._load_mask(entry)
            contour = imaging.extract_contour(mask)
            patches = imaging.sample_patches(
                img,
                contour,
                stride=p.stride,
                max_patches=p.max_per_doc,
                seed=derive_seed(self.config.seed, "patches", entry.key),
                source_doc=entry.key,
            )
            serialization.save_descriptor_set(
                imaging.patch_matrix(patches), self.patches_path(entry.key)
            )

        self._map_docs(work, entries)
        outputs = [self.patches_path(e.key) for e in entries]
        self._write_run_manifest("patches", [e.path for e in entries], outputs)
        return outputs

    def stage_train_cnn(self) -> list[Path]:
        entries = self.train_entries()
        if not entries:
            raise StageError("training manifest is empty; nothing to train on")
        inputs = [self._require(self.patches_path(e.key), "patches") for e in entries]

        writers = sorted({e.writer_id for e in entries})
        label_of = {w: i for i, w in enumerate(writers)}
        manifest_path = self.out / "cnn_train_manifest.tsv"
        lines = [f"{self.patches_path(e.key)}\t{e.writer_id}" for e in entries]
        serialization.atomic_write_bytes(manifest_path, ("\n".join(lines) + "\n").encode())

        xs, ys = [], []
        for path, writer_id in cnn.load_training_manifest(manifest_path):
            mat = serialization.load_descriptor_set(path)
            if mat.shape[0] == 0:
                logger.warning("no patches in %s; skipping", path)
                continue
            xs.append(mat)
            ys.append(np.full(mat.shape[0], label_of[writer_id], dtype=np.intp))
        if not xs:
            raise StageError("no training patches found; check the patches stage output")
        x = np.concatenate(xs)
        y = np.concatenate(ys)

        settings = self.config.cnn
        if settings.max_train_patches and len(x) > settings.max_train_patches:
            rng = np.random.default_rng(derive_seed(self.config.seed, "train-cnn", "subsample"))
            keep = rng.choice(len(x), size=settings.max_train_patches, replace=False)
            x, y = x[keep], y[keep]
        net_config = cnn.CnnConfig.preset(
            settings.preset,
            c1_filters=settings.c1_filters,
            c2_filters=settings.c2_filters,
            hidden_nodes=settings.hidden_nodes,
            num_classes=len(writers),
        )
        schedule = cnn.TrainSchedule(
            learning_rate=settings.learning_rate,
            epochs=settings.epochs,
            nesterov_momentum=settings.momentum,
            momentum_epochs=settings.momentum_epochs,
            batch_size=settings.batch_size,
            seed=derive_seed(self.config.seed, "train-cnn"),
        )

        holdout = min(max(settings.holdout_fraction, 0.0), 0.5)
        n_val = int(round(holdout * len(x)))
        rng = np.random.default_rng(derive_seed(self.config.seed, "train-cnn", "holdout"))
        order = rng.permutation(len(x))
        val_idx, train_idx = order[:n_val], order[n_val:]
        val_data = (x[val_idx], y[val_idx]) if n_val else None

        model, log = cnn.train(net_config, schedule, (x[train_idx], y[train_idx]), val_data)
        serialization.save_cnn_model(model, self.out / "cnn.scnn")
        log_payload = {
            "writers": writers,
            "n_train": int(len(train_idx)),
            "n_val": int(n_val),
            "epochs": [
                {
                    "epoch": s.epoch,
                    "mean_loss": s.mean_loss,
                    "train_accuracy": s.train_accuracy,
                    "val_accuracy": s.val_accuracy,
                }
                for s in log
            ],
        }
        log_path = self.out / "cnn_train_log.json"
        serialization.atomic_write_bytes(
            log_path, json.dumps(log_payload, indent=2, sort_keys=True).encode() + b"\n"
        )
        outputs = [self.out / "cnn.scnn", log_path, manifest_path]
        self._write_run_manifest("train-cnn", inputs, outputs)
        return outputs

    def stage_features(self) -> list[Path]:
        entries = self.all_entries()
        model = serialization.load_cnn_model(self._require(self.cnn_path, "train-cnn"))
        (self.out / "features").mkdir(parents=True, exist_ok=True)

        def work(entry: DocumentEntry):
            mat = serialization.load_descriptor_set(
                self._require(self.patches_path(entry.key), "patches")
            )
            feats = cnn.extract_features(model, mat)
            serialization.save_descriptor_set(feats, self.features_path(entry.key))

        self._map_docs(work, entries)
        inputs = [self.cnn_path] + [self.patches_path(e.key) for e in entries]
        outputs = [self.features_path(e.key) for e in entries]
        self._write_run_manifest("features", inputs, outputs)
        return outputs

    def _train_feature_matrix(self) -> tuple[np.ndarray, list[Path]]:
        entries = self.train_entries()
        paths = [self._require(self.features_path(e.key), "features") for e in entries]
        mats = [serialization.load_descriptor_set(p) for p in paths]
        mats = [m for m in mats if m.shape[0]]
        if not mats:
            raise StageError("no training features found; run 'features' first")
        return np.concatenate(mats), paths

    def stage_whiten(self) -> list[Path]:
        x, inputs = self._train_feature_matrix()
        settings = self.config.whitening
        tf = whitening.fit_whitening(x, mode=settings.mode, epsilon=settings.epsilon)
        serialization.save_whitening(tf, self.out / "whitening.swht")
        outputs = [self.out / "whitening.swht"]
        self._write_run_manifest("whiten", inputs, outputs)
        return outputs

    def stage_train_gmm(self) -> list[Path]:
        x, inputs = self._train_feature_matrix()
        tf = serialization.load_whitening(self._require(self.whitening_path, "whiten"))
        xw = whitening.apply_whitening(tf, x)
        settings = self.config.gmm
        outputs = []
        if self.config.encoder == "vlad":
            km = gmm.fit_minibatch_kmeans(
                xw,
                settings.components,
                batch_size=settings.kmeans_batch_size,
                iters=settings.kmeans_iters,
                seed=derive_seed(self.config.seed, "train-kmeans"),
            )
            serialization.save_kmeans(km, self.out / "kmeans.skms")
            outputs.append(self.out / "kmeans.skms")
        else:
            dictionary = gmm.fit_gmm(
                xw,
                settings.components,
                seed=derive_seed(self.config.seed, "train-gmm"),
                max_iters=settings.max_iters,
                tol=settings.tol,
            )
            serialization.save_gmm(dictionary, self.out / "gmm.sgmm")
            outputs.append(self.out / "gmm.sgmm")
        self._write_run_manifest("train-gmm", inputs + [self.whitening_path], outputs)
        return outputs

    def stage_encode(self) -> list[Path]:
        entries = sorted(self.test_entries(), key=lambda e: e.key)
        if not entries:
            raise StageError("test manifest is empty; nothing to encode")
        tf = serialization.load_whitening(self._require(self.whitening_path, "whiten"))
        encoder = self.config.encoder
        settings = self.config.gmm
        inputs = [self.whitening_path]
        if encoder == "vlad":
            km = serialization.load_kmeans(self._require(self.kmeans_path, "train-gmm"))
            inputs.append(self.kmeans_path)
        else:
            dictionary = serialization.load_gmm(self._require(self.gmm_path, "train-gmm"))
            inputs.append(self.gmm_path)
            params = encoding.EncoderParams(
                tau=settings.tau,
                top_c=settings.top_c,
                renormalize_truncated=settings.renormalize_truncated,
                normalization="kl" if encoder == "sv_kl" else "ssr_l2",
            )
        (self.out / "descriptors").mkdir(parents=True, exist_ok=True)

        def work(entry: DocumentEntry):
            feats = serialization.load_descriptor_set(
                self._require(self.features_path(entry.key), "features")
            )
            xw = whitening.apply_whitening(tf, feats)
            if encoder == "vlad":
                gd = encoding.encode_vlad(km, xw, doc_id=entry.key, writer_id=entry.writer_id)
            elif encoder == "fisher":
                gd = encoding.encode_fisher(
                    dictionary, xw, doc_id=entry.key, writer_id=entry.writer_id
                )
            else:
                gd = encoding.encode_supervector(
                    dictionary, xw, params, doc_id=entry.key, writer_id=entry.writer_id
                )
            serialization.save_global_descriptor(gd, self.descriptor_path(entry.key))

        self._map_docs(work, entries)
        inputs += [self.features_path(e.key) for e in entries]
        outputs = [self.descriptor_path(e.key) for e in entries]
        self._write_run_manifest("encode", inputs, outputs)
        return outputs

    def stage_evaluate(self) -> list[Path]:
        entries = sorted(self.test_entries(), key=lambda e: e.key)
        inputs = [self._require(self.descriptor_path(e.key), "encode") for e in entries]
        descriptors = [serialization.load_global_descriptor(p) for p in inputs]
        report = retrieval.evaluate(descriptors)

        lines = [
            f"encoder={self.config.encoder}",
            f"n_documents={len(descriptors)}",
            f"n_queries={report.n_queries}",
            f"map={report.mean_ap:.6f}",
        ]
        for k in sorted(report.hard_top_k):
            lines.append(f"top_{k}={report.hard_top_k[k]:.6f}")
        report_path = self.out / "report.txt"
        serialization.atomic_write_bytes(report_path, ("\n".join(lines) + "\n").encode())

        csv_buf = io.StringIO()
        writer = csv.writer(csv_buf)
        writer.writerow(["query", "writer", "ap"])
        writer_of = {d.doc_id: d.writer_id for d in descriptors}
        for doc_id, ap in report.per_query_ap:
            writer.writerow([doc_id, writer_of[doc_id], f"{ap:.6f}"])
        csv_path = self.out / "per_query_ap.csv"
        serialization.atomic_write_bytes(csv_path, csv_buf.getvalue().encode())

        outputs = [report_path, csv_path]
        if self.config.dump_rankings:
            dump = io.StringIO()
            for ranked in retrieval.rank_all(descriptors):
                row = " ".join(f"{doc}:{dist:.6f}" for doc, dist in ranked.entries)
                dump.write(f"{ranked.query_doc_id}\t{row}\n")
            rank_path = self.out / "ranked_lists.txt"
            serialization.atomic_write_bytes(rank_path, dump.getvalue().encode())
            outputs.append(rank_path)
        self._write_run_manifest("evaluate", inputs, outputs)
        return outputs


def run_stage(config: PipelineConfig, stage: str, jobs: int = 1) -> list[Path]:
    """Run one named stage; raises StageError when prerequisites are missing."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    pipe = Pipeline(config, jobs=jobs)
    pipe.out.mkdir(parents=True, exist_ok=True)
    method = getattr(pipe, "stage_" + stage.replace("-", "_"))
    logger.info("running stage %s -> %s", stage, pipe.out)
    return method()


def run_pipeline(config: PipelineConfig, jobs: int = 1) -> list[Path]:
    """Run every stage in order; returns the evaluation artifacts."""
    outputs: list[Path] = []
    for stage in STAGES:
        outputs = run_stage(config, stage, jobs=jobs)
    return outputs
