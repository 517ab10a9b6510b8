"""Full protocol orchestration.

One experiment is a single-threaded loop over sessions: train on the
session's data (new classes plus bank exemplars), record per-epoch
probability trajectories, train the entropy predictor alongside, update the
memory bank with the configured selector, rebuild prototypes, and evaluate
on the cumulative test union.

Per-epoch batch order is fixed and audited: forward, losses, optimizer
step, momentum update, enqueue; the epoch closes with one trajectory
recording.
"""

from __future__ import annotations

import math
import os

import numpy as np
import torch

from . import classifier, memory, metrics
from .contrastive import FeatureQueue, MomentumPair, scl_loss_expanded
from .dataio import DatasetStore, SessionData, generate_synthetic, load_medmnist_archive, materialize_sessions
from .datamodel import RunConfig
from .exceptions import ConfigError, DataError, TrainingError
from .expansion import (TransformationBank, build_virtual_prototypes,
                        expanded_predict_batch, multitask_loss)
from .networks import TargetModel, build_backbone, clone_model, images_to_tensor
from .predictor import (PredictedTrajectoryStore, PredictorHead, js_divergence_t,
                        reevaluate_top)
from .trajectory import TrajectoryStore, record_epoch

BATCH_HOOKS = ("forward", "losses", "optimizer_step", "momentum_update", "enqueue")
_ARCHIVE_NAMES = {("pathmnist", 28): "pathmnist.npz",
                  ("bloodmnist", 224): "bloodmnist_224.npz",
                  ("bloodmnist", 28): "bloodmnist.npz"}


def load_store(config: RunConfig) -> DatasetStore:
    """Dataset store for the configured dataset (generated or archive)."""
    cfg = config.resolve()
    sched = cfg.schedule()
    if cfg.dataset == "synthetic":
        return generate_synthetic(
            num_classes=sched.total_classes,
            per_class=sched.samples_per_base_class + cfg.synthetic_test_per_class,
            resolution=sched.resolution,
            seed=cfg.seed + 77,
            noise=cfg.synthetic_noise,
            test_per_class=cfg.synthetic_test_per_class,
        )
    name = _ARCHIVE_NAMES.get((cfg.dataset, sched.resolution),
                              f"{cfg.dataset}_{sched.resolution}.npz")
    path = os.path.join(cfg.data_dir, name)
    if not os.path.isfile(path):
        raise DataError(
            f"archive {path} not found; set ESSENTIAL_DATA_DIR or data_dir")
    return load_medmnist_archive(path)


class SessionState:
    """Mutable carrier of everything one experiment accumulates."""

    def __init__(self, config: RunConfig, store: DatasetStore):
        cfg = config.resolve()
        self.config = cfg
        self.schedule = cfg.schedule()
        self.store = store
        self.bank_variant = TransformationBank.for_variant(cfg.expansion_variant)
        self.metrics_bank = TransformationBank.for_variant(cfg.metrics_variant)

        torch.manual_seed(cfg.seed)
        backbone = build_backbone(cfg.backbone, store.resolution, store.channels,
                                  cfg.embed_dim)
        self.model = TargetModel(backbone, cfg.proj_dim, self.schedule.total_classes,
                                 self.bank_variant.M)
        self.predictor = PredictorHead(backbone.stage_channels,
                                       self.schedule.total_classes)
        self.key_model = clone_model(self.model)
        self.pair = MomentumPair(self.model, self.key_model, cfg.mu)
        self.queue = FeatureQueue(cfg.queue_length)

        self.session = -1
        self.seen_classes: list[int] = []
        self.memory_bank = memory.MemoryBank(self.schedule.memory_size)
        self.prototable: classifier.PrototypeTable | None = None
        self.expanded = None
        self.traj_store = TrajectoryStore()
        self.pred_store = PredictedTrajectoryStore()
        self.reports: list[metrics.SessionReport] = []
        self.accuracies: list[float] = []
        self.hook_logs: dict[int, list[str]] = {}
        self.audit_ids: dict[int, set] = {}
        self.uncertainty_curves: list[list[float]] = []
        self.bias_curves: list[list[float]] = []
        self.session_plan: list[SessionData] | None = None
        self._rng = np.random.default_rng(cfg.seed)

    # -- helpers ---------------------------------------------------------

    @property
    def num_seen(self) -> int:
        return len(self.seen_classes)

    def _hook(self, name: str):
        self.hook_logs[self.session].append(name)

    def _batch_tensor(self, images: np.ndarray) -> torch.Tensor:
        return images_to_tensor(images)

    def _expand_views(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B*M, C, H, W), view m of sample i at row i*M+m."""
        views = torch.stack(
            [self.bank_variant.apply_batch(x, m) for m in range(self.bank_variant.M)],
            dim=1)
        return views.reshape(-1, *x.shape[1:])

    def _embed_ids(self, ids, with_stages=False, views=True):
        """Eval-mode embeddings for train samples: (N, M, D) plus identity stages."""
        M = self.bank_variant.M if views else 1
        self.model.eval()
        chunks, stage_chunks = [], None
        batch = max(64, self.config.batch_size)
        with torch.no_grad():
            for lo in range(0, len(ids), batch):
                sel = np.asarray(ids[lo:lo + batch])
                x = self._batch_tensor(self.store.train_images[sel])
                flat = self._expand_views(x) if views else x
                if with_stages:
                    z, stages = self.model.embed(flat, return_stages=True)
                    ident = [s.reshape(len(sel), M, *s.shape[1:])[:, 0] for s in stages]
                    stage_chunks = [torch.cat([a, b]) for a, b in
                                    zip(stage_chunks, ident)] if stage_chunks else ident
                else:
                    z = self.model.embed(flat)
                chunks.append(z.reshape(len(sel), M, -1))
        self.model.train()
        emb = torch.cat(chunks)
        return (emb, stage_chunks) if with_stages else emb

    def _embed_test(self, indices) -> torch.Tensor:
        self.model.eval()
        chunks = []
        batch = max(64, self.config.batch_size)
        with torch.no_grad():
            for lo in range(0, len(indices), batch):
                sel = np.asarray(indices[lo:lo + batch])
                x = self._batch_tensor(self.store.test_images[sel])
                flat = self._expand_views(x)
                z = self.model.embed(flat)
                chunks.append(z.reshape(len(sel), self.bank_variant.M, -1))
        self.model.train()
        return torch.cat(chunks)

    def _tables_from(self, emb: torch.Tensor, labels, source: str):
        """Prototype table + expanded set from precomputed (N, M, D) embeddings."""
        by_class: dict[int, list] = {}
        cells: dict = {}
        for row, lab in enumerate(labels):
            lab = int(lab)
            by_class.setdefault(lab, []).append(emb[row, 0].numpy())
            for m in range(self.bank_variant.M):
                cells.setdefault((lab, m), []).append(emb[row, m].numpy())
        fit_mah = self.config.similarity == "mah"
        self.prototable = classifier.build_prototype_table(
            by_class, source=source, eta=self.config.eta, fit_mah=fit_mah)
        self.expanded = build_virtual_prototypes(cells, session=self.session)

    def _build_tables(self, ids, labels, source: str):
        """Embed the given train samples and rebuild both prototype tables."""
        emb = self._embed_ids(ids)          # (N, M, D)
        self._tables_from(emb, labels, source)
        return emb

    def predict_test(self, test_indices) -> np.ndarray:
        feats = self._embed_test(test_indices)
        return expanded_predict_batch(feats, self.expanded, self.config.similarity,
                                      self.prototable.mah_stats)

    # -- training --------------------------------------------------------

    def train_session(self, sdata: SessionData):
        cfg = self.config
        base = sdata.session == 0
        if base:
            missing = [c for c in sdata.classes
                       if self.store.train_class_indices(c).size == 0]
            if missing:
                raise DataError(f"base classes missing from data: {missing}")
        else:
            collision = set(sdata.classes) & set(self.seen_classes)
            if collision:
                raise DataError(f"label collision with seen classes: {sorted(collision)}")

        self.session = sdata.session
        self.hook_logs[self.session] = []
        self.audit_ids[self.session] = set()
        bank_ids = np.asarray(self.memory_bank.all_ids(), dtype=np.int64)
        allowed = set(int(i) for i in sdata.train_ids) | set(int(i) for i in bank_ids)
        self.seen_classes = sorted(set(self.seen_classes) | set(sdata.classes))
        n_seen = self.num_seen

        train_ids = np.concatenate([sdata.train_ids, bank_ids]).astype(np.int64)
        train_labels = self.store.train_labels[train_ids]
        epochs = cfg.base_epochs if base else cfg.incremental_epochs
        lr = cfg.base_lr if base else cfg.incremental_lr

        # fresh per-session machinery: key twin, queues, trajectory stores
        self.key_model = clone_model(self.model)
        self.pair = MomentumPair(self.model, self.key_model, cfg.mu)
        self.queue = FeatureQueue(cfg.queue_length)
        self.traj_store = TrajectoryStore()
        self.pred_store = PredictedTrajectoryStore()
        optimizer = torch.optim.SGD(
            list(self.model.parameters()) + list(self.predictor.parameters()),
            lr=lr, momentum=0.9)

        self._build_tables(train_ids, train_labels, "all_samples")
        M = self.bank_variant.M
        new_test_mask = np.isin(sdata.test_labels, sdata.classes)
        bias_curve: list[float] = []
        self.model.train()

        for _epoch in range(1, epochs + 1):
            order = self._rng.permutation(len(train_ids))
            for lo in range(0, len(order), cfg.batch_size):
                rows = order[lo:lo + cfg.batch_size]
                ids = train_ids[rows]
                y = torch.as_tensor(train_labels[rows], dtype=torch.long)
                x = self._batch_tensor(self.store.train_images[ids])
                B = x.shape[0]

                self._hook("forward")
                flat = self._expand_views(x)
                z_flat, stages = self.model.embed(flat, return_stages=True)
                z = z_flat.reshape(B, M, -1)
                with torch.no_grad():
                    self.key_model.eval()
                    zk = self.key_model.embed(flat)
                    rk = self.key_model.project(zk)
                rq = self.model.project(z_flat)

                y_rep = y.repeat_interleave(M)
                t_rep = torch.arange(M).repeat(B)
                ce = classifier.cosine_ce_loss(z[:, 0], y, self.prototable)
                scl = scl_loss_expanded(rq, y_rep, t_rep, rk, y_rep, t_rep,
                                        self.queue, cfg.tau, M)
                mt = multitask_loss(z_flat, y_rep, t_rep, self.model.class_head,
                                    self.model.transform_head, n_seen)
                ident_stages = [s.reshape(B, M, *s.shape[1:])[:, 0].detach()
                                for s in stages]
                pred_probs = self.predictor(ident_stages, n_seen)
                with torch.no_grad():
                    true_probs = classifier.prototype_probabilities_t(
                        z[:, 0].detach(), self.prototable)
                js = js_divergence_t(true_probs, pred_probs).mean()

                self._hook("losses")
                total = classifier.joint_loss(ce, scl, cfg.alpha) + mt + cfg.beta * js

                optimizer.zero_grad()
                total.backward()
                self._hook("optimizer_step")
                optimizer.step()
                self._hook("momentum_update")
                self.pair.update()
                self._hook("enqueue")
                virtual = (y_rep * M + t_rep).tolist()
                self.queue.enqueue(rk, virtual)
                self.audit_ids[self.session].update(int(i) for i in ids)

            # close the epoch: refresh prototypes, record true and predicted rows
            emb, ident_stages = self._embed_ids(train_ids, with_stages=True)
            self._tables_from(emb, train_labels, "all_samples")
            probs = classifier.prototype_probabilities(emb[:, 0].numpy(), self.prototable)
            record_epoch(self.traj_store,
                         {int(i): probs[r] for r, i in enumerate(train_ids)})
            self._hook("record_epoch")
            with torch.no_grad():
                pred = self.predictor(ident_stages, n_seen).numpy()
            self.pred_store.record_epoch(
                {int(i): pred[r] for r, i in enumerate(train_ids)})
            if not base and new_test_mask.any():
                preds = self.predict_test(sdata.test_indices[new_test_mask])
                bias_curve.append(metrics.misclassified_as_base(
                    preds, sdata.test_labels[new_test_mask],
                    self.schedule.classes_for_session(0)))

        illegal = self.audit_ids[self.session] - allowed
        if illegal:
            raise TrainingError(
                f"data isolation breach: optimizer saw ids {sorted(illegal)[:5]}")
        self._assert_hook_order(self.hook_logs[self.session])

        # select exemplars for the classes introduced this session
        selection = self._select(sdata)
        self.memory_bank = memory.update_bank(self.memory_bank, selection, n_seen)
        self.memory_bank.validate()

        # final prototypes: whole base set at session 0, bank exemplars after
        if base:
            self._build_tables(train_ids, train_labels, "all_samples")
        else:
            ex_ids = np.asarray(self.memory_bank.all_ids(), dtype=np.int64)
            self._build_tables(ex_ids, self.store.train_labels[ex_ids], "exemplars")

        report = self._evaluate(sdata, bias_curve)
        self.reports.append(report)
        return report

    @staticmethod
    def _assert_hook_order(log):
        i = 0
        while i < len(log):
            if log[i] == "record_epoch":
                i += 1
                continue
            cycle = tuple(log[i:i + len(BATCH_HOOKS)])
            if cycle != BATCH_HOOKS:
                raise TrainingError(f"epoch hook order violated near index {i}: {cycle}")
            i += len(BATCH_HOOKS)

    # -- exemplar selection ----------------------------------------------

    def _select(self, sdata: SessionData) -> memory.Selection:
        cfg = self.config
        quotas_list = memory.quota(self.memory_bank.budget, self.num_seen)
        quotas = {c: quotas_list[c] for c in self.seen_classes}
        ids = [int(i) for i in sdata.train_ids]
        class_of = {int(i): int(self.store.train_labels[i]) for i in ids}

        if cfg.selector == "random":
            return memory.select_random(ids, class_of, quotas,
                                        seed=cfg.seed * 1009 + sdata.session)
        if cfg.selector == "nme":
            emb = self._embed_ids(np.asarray(ids), views=False)
            embeddings = {i: emb[r, 0].numpy() for r, i in enumerate(ids)}
            return memory.select_nme(embeddings, class_of, quotas)
        if cfg.selector == "pool":
            probs = {i: self.traj_store.get(i).probs_per_epoch[-1] for i in ids}
            return memory.select_pool(probs, class_of, quotas)
        if cfg.selector == "committee":
            E = self.traj_store.num_epochs()
            marks = sorted({max(1, round(E * 0.25)), max(1, round(E * 0.5)), E})
            if len(marks) < 2:
                raise TrainingError("committee selection needs >= 2 distinct snapshots")
            members = [{i: self.traj_store.get(i).probs_per_epoch[e - 1] for i in ids}
                       for e in marks]
            return memory.select_committee(members, class_of, quotas)
        if cfg.selector == "uta":
            return self._select_uta(ids, class_of, quotas)
        raise ConfigError(f"unknown selector {cfg.selector!r}")

    def _select_uta(self, ids, class_of, quotas) -> memory.Selection:
        """Rank by predicted average cumulative entropy, re-evaluate the top
        candidates against the recorded trajectories, then pick per quota."""
        cfg = self.config
        predicted = self.pred_store.predicted_scores()
        true_scores: dict[int, float] = {}
        by_class: dict[int, list[int]] = {}
        for sid in ids:
            by_class.setdefault(class_of[sid], []).append(sid)
        for cls, members in sorted(by_class.items()):
            ranked = sorted(members, key=lambda i: (-predicted[i], i))
            k = min(len(ranked),
                    max(1, math.ceil(cfg.reevaluate_factor * quotas.get(cls, 0))))
            if cfg.ce_mode == "sum":
                true_scores.update(reevaluate_top(ranked, k, self.traj_store))
            else:
                scores = self.traj_store.scores(cfg.ce_mode)
                true_scores.update({i: scores[i] for i in ranked[:k]})
        return memory.select_uta(true_scores, class_of, quotas)

    # -- evaluation -------------------------------------------------------

    def _evaluate(self, sdata: SessionData, bias_curve) -> metrics.SessionReport:
        preds = self.predict_test(sdata.test_indices)
        labels = sdata.test_labels
        acc = metrics.accuracy(preds, labels)
        self.accuracies.append(acc)
        confusion = metrics.confusion_matrix(preds, labels, self.seen_classes)
        uncertainty = self.traj_store.uncertainty_per_epoch()
        inter, intra = self._distance_metrics(sdata)
        self.uncertainty_curves.append(uncertainty)
        self.bias_curves.append(bias_curve)
        report = metrics.SessionReport(
            session=sdata.session,
            accuracies=list(self.accuracies),
            classes=list(self.seen_classes),
            confusion=confusion,
            uncertainty_per_epoch=uncertainty,
            inter_class=inter,
            intra_class=intra,
            misclassified_as_base_per_epoch=bias_curve,
        )
        counts = [int((labels == c).sum()) for c in self.seen_classes]
        report.validate(per_class_counts=counts)
        return report

    def _distance_metrics(self, sdata: SessionData, cap: int = 100):
        """Mean predicted distribution per class, original vs augmented."""
        bank = self.metrics_bank
        originals: dict[int, np.ndarray] = {}
        augmented: dict[int, np.ndarray] = {}
        for cls in self.seen_classes:
            rows = sdata.test_indices[sdata.test_labels == cls][:cap]
            images = self.store.test_images[rows]
            x = self._batch_tensor(images)
            viewed = torch.stack([bank.apply_batch(x, m) for m in range(bank.M)], dim=1)
            self.model.eval()
            with torch.no_grad():
                emb = self.model.embed(viewed.reshape(-1, *x.shape[1:]))
            self.model.train()
            emb = emb.reshape(len(rows), bank.M, -1)
            probs = classifier.prototype_probabilities_t(
                emb.reshape(-1, emb.shape[-1]), self.prototable)
            probs = probs.reshape(len(rows), bank.M, -1).numpy()
            originals[cls] = probs[:, 0].mean(axis=0)
            aug = probs[:, 1:] if bank.M > 1 else probs[:, :1]
            augmented[cls] = aug.reshape(-1, probs.shape[-1]).mean(axis=0)
        n = self.num_seen
        inter = np.zeros((n, n))
        for a, ca in enumerate(self.seen_classes):
            for b, cb in enumerate(self.seen_classes):
                if a < b:
                    d = metrics.inter_class_distance(originals[ca], originals[cb])
                    inter[a, b] = inter[b, a] = d
        intra = {c: metrics.intra_class_distance(originals[c], augmented[c])
                 for c in self.seen_classes}
        return inter, intra


# -- public per-session operations ----------------------------------------

def run_base_session(config: RunConfig, data: DatasetStore,
                     sessions: list[SessionData] | None = None) -> SessionState:
    """Train session 0 and return the carrying state.

    The state keeps the materialized per-session plan so callers can feed
    run_incremental_session one entry at a time.
    """
    state = SessionState(config, data)
    if sessions is None:
        sessions = materialize_sessions(data, state.schedule, state.config.seed)
    state.session_plan = sessions
    state.train_session(sessions[0])
    return state


def run_incremental_session(state: SessionState, new_data: SessionData) -> SessionState:
    state.train_session(new_data)
    return state


def run_experiment(config: RunConfig, run_dir: str | None = None) -> list[metrics.SessionReport]:
    """Run every session of the configured schedule, persisting artifacts."""
    from .reporting import ExperimentManifest, write_run_artifacts, write_session_artifacts

    cfg = config.resolve()
    manifest = None
    if run_dir is not None:
        # bookkeeping first: the manifest must exist even if the run dies
        os.makedirs(run_dir, exist_ok=True)
        manifest = ExperimentManifest(cfg, run_dir, cfg.schedule().num_sessions)
        manifest.write()
    try:
        store = load_store(cfg)
        sessions = materialize_sessions(store, cfg.schedule(), cfg.seed)
        state = SessionState(cfg, store)
        state.session_plan = sessions
        for sdata in sessions:
            state.train_session(sdata)
            if run_dir is not None:
                write_session_artifacts(state, run_dir, sdata.session)
                manifest.mark(sdata.session, "completed")
    except Exception:
        if manifest is not None:
            manifest.mark_first_pending_failed()
        raise
    if run_dir is not None:
        write_run_artifacts(state, run_dir)
    return state.reports
