"""Stage orchestration: data, training phases, evaluation, sweep, chat.

Stages form a strict chain -- gen-data, warmup, pretrain-retrieval,
adv-train, rerank-train -- each consuming the previous stage's checkpoint
and leaving its own plus a CSV loss log.  Running a stage out of order
raises StageOrderError; a non-finite loss raises NumericalAbort, leaving
the last completed epoch's checkpoint on disk.

Determinism: every stochastic site owns a named rng stream (see seeds),
wall-clock time is confined to the final CSV column, and loss values are
written with full repr precision, so two runs with the same seed produce
identical logs and byte-identical checkpoints.
"""

from __future__ import annotations

import csv
import json
import sys
import time
import warnings
import zlib
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import seeds
from .autodiff import Tensor
from .bm25 import Bm25Index
from .checkpoint import checkpoint_stage, load_checkpoint, save_checkpoint
from .config import TrainConfig, validate_config
from .corpus import (Corpus, Vocab, DialoguePair, build_vocab, decode_ids,
                     encode_text, generate_synthetic_corpus, read_pairs,
                     read_pool, splice_context, validate_corpus, write_pairs,
                     write_pool)
from .discriminator import disc_step, score_pairs
from .generation import (pg_step, sequence_ce, splice_knowledge,
                         build_teacher_batch, warmup_step)
from .metrics import (generation_report, render_table, report_json,
                      retrieval_metrics)
from .model import (Hidden, ModelConfig, add_retrieval_encoder,
                    encode_mean_pool, init_params, match_score, param_subset,
                    params_fingerprint, sample_batch)
from .rerank import build_candidate_set, rerank, rerank_train_epoch
from .retrieval import (build_pool_cache, mine_qrm_batch, mine_sqd_batch,
                        pool_token_lists, qrm_step, retrieve_top_m_batch,
                        sqd_pool_distances, sqd_step)


class StageOrderError(RuntimeError):
    """A stage was invoked before its prerequisite produced its artifact."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint remains."""


_CKPT = {"warmup": "ckpt_warmup", "retrieval": "ckpt_retrieval",
         "adversarial": "ckpt_adversarial", "rerank": "ckpt_rerank"}
_PREREQ_CMD = {"warmup": "warmup", "retrieval": "pretrain-retrieval",
               "adversarial": "adv-train", "rerank": "rerank-train"}

_DATA_FILES = ("train.jsonl", "valid.jsonl", "test.jsonl", "pool.jsonl")


# ---------------------------------------------------------------------------
# shared plumbing


def render_config(cfg: TrainConfig) -> str:
    """key = value lines that parse_config reads back to the same values."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


def model_config(cfg: TrainConfig, vocab: Vocab) -> ModelConfig:
    return ModelConfig(vocab_size=vocab.size, d_model=cfg.d_model,
                       n_heads=cfg.n_heads, d_ff=cfg.d_ff,
                       n_layers=cfg.n_layers, d_proj=cfg.d_proj,
                       max_seq_len=cfg.max_seq_len)


def load_world(cfg: TrainConfig, out: Path):
    """Corpus, vocabulary, and model shape from the gen-data artifacts."""
    out = Path(out)
    missing = [f for f in _DATA_FILES if not (out / f).exists()]
    if missing:
        raise StageOrderError(
            f"missing {', '.join(missing)} under {out}; run gen-data first")
    corpus = Corpus(train=read_pairs(out / "train.jsonl"),
                    valid=read_pairs(out / "valid.jsonl"),
                    test=read_pairs(out / "test.jsonl"),
                    pool=read_pool(out / "pool.jsonl"))
    validate_corpus(corpus)
    vocab = build_vocab(corpus, cfg.vocab_size)
    return corpus, vocab, model_config(cfg, vocab)


def _load_stage(out: Path, stage: str):
    stem = Path(out) / _CKPT[stage]
    if checkpoint_stage(stem) is None:
        raise StageOrderError(
            f"no '{stage}' checkpoint under {out}; run {_PREREQ_CMD[stage]} "
            "first")
    params, manifest = load_checkpoint(stem)
    if manifest["stage"] != stage:
        raise StageOrderError(
            f"checkpoint {stem} holds stage {manifest['stage']!r}, "
            f"expected {stage!r}")
    return params


def _save_stage(out: Path, stage: str, params, cfg, step):
    save_checkpoint(Path(out) / _CKPT[stage], params, stage, cfg, step)


def _write_log(out: Path, name: str, header: list, rows: list):
    path = Path(out) / "logs"
    path.mkdir(parents=True, exist_ok=True)
    with open(path / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _ensure_finite(value: float, stage: str):
    if not np.isfinite(value):
        raise NumericalAbort(f"non-finite loss in {stage} stage")
    return value


def _fmt(x: float) -> str:
    return repr(float(x))


def _say(msg: str):
    print(msg, flush=True)


def _shuffled(items: list, rng) -> list:
    idx = rng.permutation(len(items))
    return [items[i] for i in idx]


def _enc_prefix(params) -> str:
    return "sqd_enc." if any(k.startswith("sqd_enc.") for k in params) else ""


def _src_ids(pairs, vocab, mcfg):
    return [encode_text(splice_context(p), vocab, mcfg.max_seq_len)
            for p in pairs]


def _resp_ids(pairs, vocab):
    return [encode_text(p.response, vocab) for p in pairs]


# ---------------------------------------------------------------------------
# gen-data


def stage_gen_data(cfg: TrainConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_synthetic_corpus(seed=cfg.seed, n_train=cfg.n_train,
                                       n_eval=cfg.n_eval,
                                       pool_size=cfg.pool_size)
    write_pairs(out / "train.jsonl", corpus.train)
    write_pairs(out / "valid.jsonl", corpus.valid)
    write_pairs(out / "test.jsonl", corpus.test)
    write_pool(out / "pool.jsonl", corpus.pool)
    (out / "config.txt").write_text(render_config(cfg), encoding="utf-8")
    vocab = build_vocab(corpus, cfg.vocab_size)
    summary = {"train": len(corpus.train), "valid": len(corpus.valid),
               "test": len(corpus.test), "pool": corpus.pool.size,
               "vocab": vocab.size}
    _say(f"[gen-data] train={summary['train']} valid={summary['valid']} "
         f"test={summary['test']} pool={summary['pool']} "
         f"vocab={summary['vocab']} -> {out}")
    return summary


# ---------------------------------------------------------------------------
# warmup


def _mean_val_ce(params, mcfg, vocab, pairs, bs) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for lo in range(0, len(pairs), bs):
            chunk = pairs[lo:lo + bs]
            src = _src_ids(chunk, vocab, mcfg)
            hidden, _ = encode_mean_pool(params, mcfg, src)
            tb = build_teacher_batch(_resp_ids(chunk, vocab), mcfg)
            per = sequence_ce(params, mcfg, hidden, tb)
            total += float(per.data.sum())
            count += len(chunk)
    return total / count


def stage_warmup(cfg: TrainConfig, out) -> dict:
    corpus, vocab, mcfg = load_world(cfg, out)
    params = init_params(mcfg, cfg.seed)
    opt = ad.Adam(param_subset(params, "warmup"), cfg.warmup_lr)
    rows, step = [], 0
    base_val = _mean_val_ce(params, mcfg, vocab, corpus.valid, cfg.bs)
    rows.append([0, "warmup", "", _fmt(base_val), _fmt(0.0)])
    _say(f"[warmup] baseline val_ce={base_val:.4f}")
    for epoch in range(1, cfg.warmup_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, seeds.WARMUP, epoch])
        order = _shuffled(corpus.train, rng)
        losses = []
        for lo in range(0, len(order), cfg.bs):
            chunk = order[lo:lo + cfg.bs]
            ce = warmup_step(params, mcfg, _src_ids(chunk, vocab, mcfg),
                             _resp_ids(chunk, vocab), opt)
            losses.append(_ensure_finite(ce, "warmup"))
            step += 1
        val = _mean_val_ce(params, mcfg, vocab, corpus.valid, cfg.bs)
        _ensure_finite(val, "warmup")
        dt = time.perf_counter() - t0
        rows.append([epoch, "warmup", _fmt(np.mean(losses)), _fmt(val),
                     _fmt(dt)])
        _say(f"[warmup] epoch {epoch}/{cfg.warmup_epochs} "
             f"train_ce={np.mean(losses):.4f} val_ce={val:.4f} ({dt:.1f}s)")
        _save_stage(out, "warmup", params, cfg, step)
    _write_log(out, "warmup", ["epoch", "stage", "train_ce", "val_ce",
                               "seconds"], rows)
    return {"initial_val_ce": base_val, "final_val_ce": float(rows[-1][3])}


# ---------------------------------------------------------------------------
# retrieval pretraining


def _attach_clusters(cfg: TrainConfig, corpus) -> None:
    """Rehydrate in-memory paraphrase-cluster ids onto a loaded corpus.

    Cluster ids never enter the JSONL records, but negative mining needs
    them to keep paraphrase twins out of the negatives.  The generator is
    deterministic, so regenerating with the run seed recovers the ids; a
    corpus that does not match the seed (hand-edited files) just trains
    without the exclusion.
    """
    mem = generate_synthetic_corpus(seed=cfg.seed, n_train=cfg.n_train,
                                    n_eval=cfg.n_eval,
                                    pool_size=cfg.pool_size)
    same_pairs = all(a.query == b.query and a.response == b.response
                     for a, b in zip(corpus.all_pairs(), mem.all_pairs()))
    same_pool = corpus.pool.size == mem.pool.size and all(
        a.query == b.query and a.response == b.response
        for a, b in zip(corpus.pool.entries, mem.pool.entries))
    if not (same_pairs and same_pool):
        warnings.warn("corpus files do not match the run seed; mining "
                      "proceeds without paraphrase-cluster exclusion",
                      stacklevel=2)
        return
    for have, want in zip(corpus.all_pairs(), mem.all_pairs()):
        have.cluster_id = want.cluster_id
    for have, want in zip(corpus.pool.entries, mem.pool.entries):
        have.cluster_id = want.cluster_id


def stage_retrieval(cfg: TrainConfig, out) -> dict:
    corpus, vocab, mcfg = load_world(cfg, out)
    _attach_clusters(cfg, corpus)
    params = _load_stage(out, "warmup")
    if cfg.no_multi_learning:
        add_retrieval_encoder(params, mcfg, cfg.seed)
    prefix = _enc_prefix(params)
    bm25_q = Bm25Index(pool_token_lists(corpus.pool, vocab, "query"))
    opt_sqd = ad.Adam(param_subset(params, "sqd", prefix), cfg.retrieval_lr)
    opt_qrm = ad.Adam(param_subset(params, "qrm"), cfg.retrieval_lr)
    rows, step = [], 0
    for epoch in range(1, cfg.multitask_epochs + 1):
        t0 = time.perf_counter()
        sqd_cache = build_pool_cache(params, mcfg, vocab, corpus.pool,
                                     enc_prefix=prefix)
        shuffle_rng = np.random.default_rng([cfg.seed, seeds.EPOCH, epoch])
        aug_rng = np.random.default_rng([cfg.seed, seeds.SQD_MINE, epoch])
        order = _shuffled(corpus.train, shuffle_rng)
        sqd_losses, qrm_losses = [], []
        for lo in range(0, len(order), cfg.bs):
            chunk = order[lo:lo + cfg.bs]
            tri = mine_sqd_batch([p.query for p in chunk], corpus.pool,
                                 vocab, bm25_q, cfg.m, aug_rng,
                                 cfg.word_dropout,
                                 clusters=[p.cluster_id for p in chunk])
            sqd_losses.append(_ensure_finite(
                sqd_step(params, mcfg, tri, cfg.sqd_margin, opt_sqd, prefix),
                "retrieval"))
            mb = mine_qrm_batch(chunk, params, mcfg, vocab, corpus.pool,
                                sqd_cache, cfg.m, prefix)
            qrm_losses.append(_ensure_finite(
                qrm_step(params, mcfg, mb, opt_qrm), "retrieval"))
            step += 1
        dt = time.perf_counter() - t0
        rows.append([epoch, "retrieval", _fmt(np.mean(sqd_losses)),
                     _fmt(np.mean(qrm_losses)), _fmt(dt)])
        _say(f"[pretrain-retrieval] epoch {epoch}/{cfg.multitask_epochs} "
             f"sqd={np.mean(sqd_losses):.4f} qrm={np.mean(qrm_losses):.4f} "
             f"({dt:.1f}s)")
        _save_stage(out, "retrieval", params, cfg, step)
    _write_log(out, "retrieval", ["epoch", "stage", "sqd_loss", "qrm_loss",
                                  "seconds"], rows)
    return {"sqd_loss": float(rows[-1][2]), "qrm_loss": float(rows[-1][3])}


# ---------------------------------------------------------------------------
# adversarial training


def _caches(params, mcfg, vocab, pool, prefix):
    """Main-encoder cache plus the SQD-encoder one when it is separate."""
    main = build_pool_cache(params, mcfg, vocab, pool)
    if prefix:
        return main, build_pool_cache(params, mcfg, vocab, pool,
                                      enc_prefix=prefix)
    return main, main


def _batch_rollouts(params, mcfg, src, n_roll, rng, max_len):
    """n_roll temperature-1 samples per source, decoded in one batch."""
    with ad.no_grad():
        hidden, _ = encode_mean_pool(params, mcfg, src)
        tiled = Hidden(Tensor(np.repeat(hidden.states.data, n_roll, axis=0)),
                       np.repeat(hidden.mask, n_roll, axis=0))
    seqs = sample_batch(params, mcfg, tiled, mode="sample", temperature=1.0,
                        rng=rng, max_len=max_len)
    return [seqs[i * n_roll:(i + 1) * n_roll] for i in range(len(src))]


def stage_adversarial(cfg: TrainConfig, out) -> dict:
    corpus, vocab, mcfg = load_world(cfg, out)
    params = _load_stage(out, "retrieval")
    prefix = _enc_prefix(params)
    alpha = 0.0 if cfg.no_reward else cfg.alpha
    kg = not cfg.no_kg
    g_opt = ad.Adam(param_subset(params, "generator"), cfg.g_lr)
    d_opt = ad.Adam(param_subset(params, "disc"), cfg.d_lr)
    rows, step = [], 0
    for epoch in range(1, cfg.adversarial_epochs + 1):
        t0 = time.perf_counter()
        cache, sqd_cache = _caches(params, mcfg, vocab, corpus.pool, prefix)
        shuffle_rng = np.random.default_rng([cfg.seed, seeds.ADV, epoch])
        roll_rng = np.random.default_rng([cfg.seed, seeds.ROLLOUT, epoch])
        order = _shuffled(corpus.train, shuffle_rng)
        ce_l, pg_l, fused_l, d_l = [], [], [], []
        for lo in range(0, len(order), cfg.bs):
            chunk = order[lo:lo + cfg.bs]
            queries = [encode_text(p.query, vocab, mcfg.max_seq_len)
                       for p in chunk]
            retrieved = retrieve_top_m_batch(params, mcfg, queries,
                                             corpus.pool, cache, cfg.m,
                                             enc_prefix=prefix,
                                             sqd_cache=sqd_cache)
            src = []
            for pair, cands in zip(chunk, retrieved):
                text = splice_context(pair)
                if kg and cands:
                    text = splice_knowledge(text, cands[0].response,
                                            mcfg.max_seq_len)
                src.append(encode_text(text, vocab, mcfg.max_seq_len))
            resp = _resp_ids(chunk, vocab)
            if alpha != 0.0:
                rolls = _batch_rollouts(params, mcfg, src, cfg.n_rollouts,
                                        roll_rng, cfg.max_gen_len)
                flat = [s for g in rolls for s in g]
                flat_q = [q for q, g in zip(queries, rolls) for _ in g]
                scores = score_pairs(params, mcfg, flat_q, flat)
                rewards, at = [], 0
                for g in rolls:
                    rewards.append(scores[at:at + len(g)])
                    at += len(g)
            else:
                rolls, rewards = None, None
            rep = pg_step(params, mcfg, src, resp, rolls, rewards, alpha,
                          g_opt)
            for v in (rep.ce, rep.pg, rep.fused):
                _ensure_finite(v, "adversarial")
            ce_l.append(rep.ce)
            pg_l.append(rep.pg)
            fused_l.append(rep.fused)
            if rolls is None:
                rolls = _batch_rollouts(params, mcfg, src, cfg.n_rollouts,
                                        roll_rng, cfg.max_gen_len)
            ret_negs = [[list(cache.resp_ids[c.pool_id]) for c in cands]
                        for cands in retrieved]
            d_loss = disc_step(params, mcfg, queries, resp, ret_negs, rolls,
                               cfg.delta1, cfg.delta2, cfg.reg_lambda, d_opt)
            d_l.append(_ensure_finite(d_loss, "adversarial"))
            step += 1
        dt = time.perf_counter() - t0
        rows.append([epoch, "adversarial", _fmt(np.mean(ce_l)),
                     _fmt(np.mean(pg_l)), _fmt(np.mean(fused_l)),
                     _fmt(np.mean(d_l)), _fmt(alpha), _fmt(dt)])
        _say(f"[adv-train] epoch {epoch}/{cfg.adversarial_epochs} "
             f"g_ce={np.mean(ce_l):.4f} g_pg={np.mean(pg_l):.4f} "
             f"g_fused={np.mean(fused_l):.4f} d_hinge={np.mean(d_l):.4f} "
             f"alpha={alpha} ({dt:.1f}s)")
        _save_stage(out, "adversarial", params, cfg, step)
    _write_log(out, "adversarial", ["epoch", "stage", "g_ce", "g_pg",
                                    "g_fused", "d_hinge", "alpha",
                                    "seconds"], rows)
    return {"g_fused": float(rows[-1][4]), "d_hinge": float(rows[-1][5])}


# ---------------------------------------------------------------------------
# rerank training


def _train_rerank(params, cfg, corpus, vocab, mcfg):
    """Shared by rerank-train and sweep so both produce identical heads."""
    prefix = _enc_prefix(params)
    cache, sqd_cache = _caches(params, mcfg, vocab, corpus.pool, prefix)
    bm25_r = Bm25Index(pool_token_lists(corpus.pool, vocab, "response"))
    opt = ad.Adam(param_subset(params, "rerank"), cfg.retrieval_lr)
    encoder_names = [k for k in params if not k.startswith("psi_m.")]
    before = params_fingerprint(params, encoder_names)
    history = []
    for epoch in range(1, cfg.rerank_epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng([cfg.seed, seeds.RERANK, epoch, 0])
        cand_rng = np.random.default_rng([cfg.seed, seeds.RERANK, epoch, 1])
        order = _shuffled(corpus.train, shuffle_rng)
        loss = rerank_train_epoch(params, mcfg, vocab, order, corpus.pool,
                                  cache, bm25_r, cfg.m, cfg.n,
                                  not cfg.no_kg, cfg.bs, opt, cand_rng,
                                  cfg.max_gen_len, prefix, sqd_cache)
        _ensure_finite(loss, "rerank")
        history.append((epoch, loss, time.perf_counter() - t0))
    if params_fingerprint(params, encoder_names) != before:
        raise RuntimeError("rerank training must leave the encoder frozen")
    return history


def stage_rerank_train(cfg: TrainConfig, out) -> dict:
    corpus, vocab, mcfg = load_world(cfg, out)
    params = _load_stage(out, "adversarial")
    history = _train_rerank(params, cfg, corpus, vocab, mcfg)
    rows = [[e, "rerank", _fmt(loss), _fmt(dt)] for e, loss, dt in history]
    for e, loss, dt in history:
        _say(f"[rerank-train] epoch {e}/{cfg.rerank_epochs} bce={loss:.4f} "
             f"({dt:.1f}s)")
    _save_stage(out, "rerank", params, cfg, len(history))
    _write_log(out, "rerank", ["epoch", "stage", "bce", "seconds"], rows)
    return {"bce": history[-1][1]}


# ---------------------------------------------------------------------------
# evaluation


def _subset_rank(entry_ids, dists, resp_emb, q_emb, params, truth_id, m):
    """Two-stage rank of the truth entry inside one candidate subset."""
    entry_ids = np.asarray(entry_ids)
    d = dists[entry_ids]
    order1 = np.lexsort((entry_ids, d))
    width = min(4 * m, len(entry_ids))
    stage1 = entry_ids[order1[:width]]
    rest = entry_ids[order1[width:]]
    with ad.no_grad():
        q_rep = Tensor(np.repeat(q_emb, len(stage1), axis=0))
        scores = match_score(params, q_rep, Tensor(resp_emb[stage1])).data
    order2 = np.lexsort((stage1, -scores))
    ranked = list(stage1[order2]) + list(rest)
    return ranked.index(truth_id) + 1


def evaluate_params(params, cfg: TrainConfig, corpus, vocab, mcfg,
                    out=None, write_outputs=False) -> dict:
    """Generation and retrieval metrics for a trained parameter set."""
    if not 1 <= cfg.eval_candidates <= corpus.pool.size:
        raise ValueError(
            f"eval_candidates={cfg.eval_candidates} must lie in "
            f"[1, pool size {corpus.pool.size}]")
    prefix = _enc_prefix(params)
    cache, sqd_cache = _caches(params, mcfg, vocab, corpus.pool, prefix)
    bm25_r = Bm25Index(pool_token_lists(corpus.pool, vocab, "response"))
    resp_to_id = {e.response: e.id for e in corpus.pool.entries}
    kg = not cfg.no_kg

    hyps, refs, ranks, bm25_ranks, trace = [], [], [], [], []
    for i, pair in enumerate(corpus.test):
        # -- generation through the full rerank path; candidate sets hold
        #    m retrieved + n generated + exactly one truth entry
        rng = np.random.default_rng([cfg.seed, seeds.EVAL, i, 1])
        cands, query_text = build_candidate_set(
            params, mcfg, vocab, pair, corpus.pool, cache, None, cfg.m,
            cfg.n, kg, rng, cfg.max_gen_len, prefix, include_truth=True,
            sqd_cache=sqd_cache)
        q_ids = encode_text(query_text, vocab, mcfg.max_seq_len)
        ranked = rerank(params, mcfg, q_ids, cands)
        hyps.append(decode_ids(ranked[0].tokens, vocab))
        refs.append(pair.response)
        trace.append({"query_id": i,
                      "candidates": [{"rank": r + 1, "score": c.score,
                                      "provenance": c.provenance}
                                     for r, c in enumerate(ranked)]})

        # -- retrieval rank over a fixed-size candidate subset
        truth_id = resp_to_id[pair.response]
        sub_rng = np.random.default_rng([cfg.seed, seeds.EVAL, i, 0])
        others = np.setdiff1d(np.arange(corpus.pool.size), [truth_id])
        distract = sub_rng.choice(others, size=cfg.eval_candidates - 1,
                                  replace=False)
        subset = np.concatenate([[truth_id], distract])
        bare_q = encode_text(pair.query, vocab, mcfg.max_seq_len)
        dists = sqd_pool_distances(params, mcfg, [bare_q], sqd_cache,
                                   prefix)[0]
        with ad.no_grad():
            _, pooled = encode_mean_pool(params, mcfg, [bare_q])
        ranks.append((_subset_rank(subset, dists, cache.resp_emb,
                                   pooled.data, params, truth_id, cfg.m),
                      cfg.eval_candidates))
        scores = bm25_r.scores(bare_q)[subset]
        order = np.lexsort((subset, -scores))
        bm25_ranks.append((list(subset[order]).index(truth_id) + 1,
                           cfg.eval_candidates))

    gen = generation_report(hyps, refs)
    retr = retrieval_metrics(ranks)
    bm25_mrr = retrieval_metrics(bm25_ranks).mrr
    report = {**gen.as_dict(), **retr.as_dict(), "bm25_mrr": bm25_mrr}
    if write_outputs and out is not None:
        out = Path(out)
        (out / "eval_report.json").write_text(report_json(report) + "\n",
                                              encoding="utf-8")
        with open(out / "rerank_trace.jsonl", "w", encoding="utf-8") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    return report


def stage_evaluate(cfg: TrainConfig, out) -> dict:
    corpus, vocab, mcfg = load_world(cfg, out)
    params = _load_stage(out, "rerank")
    report = evaluate_params(params, cfg, corpus, vocab, mcfg, out,
                             write_outputs=True)
    _say(render_table(report, title="evaluation (test split)"))
    return report


# ---------------------------------------------------------------------------
# sweep


_SWEEP_METRICS = ["bleu", "rouge_l", "meteor", "chrf", "mrr", "acc",
                  "hit@5", "hit@10", "hit@50"]


def stage_sweep(cfg: TrainConfig, out, m_values=None, n_values=None) -> list:
    corpus, vocab, mcfg = load_world(cfg, out)
    if checkpoint_stage(Path(out) / _CKPT["adversarial"]) is None:
        raise StageOrderError(
            f"sweep requires the adversarial checkpoint under {out}; "
            "run adv-train first")
    m_values = list(m_values) if m_values else [cfg.m]
    n_values = list(n_values) if n_values else [cfg.n]
    rows = []
    for m in m_values:
        for n in n_values:
            cell = replace(cfg, m=m, n=n, k=min(cfg.k, m + n + 1))
            validate_config(cell)
            params = _load_stage(out, "adversarial")
            _train_rerank(params, cell, corpus, vocab, mcfg)
            report = evaluate_params(params, cell, corpus, vocab, mcfg)
            rows.append([m, n] + [report[k] for k in _SWEEP_METRICS])
            _say(f"[sweep] m={m} n={n} mrr={report['mrr']:.4f} "
                 f"bleu={report['bleu']:.4f}")
    path = Path(out) / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "n"] + _SWEEP_METRICS)
        for row in rows:
            w.writerow(row[:2] + [_fmt(v) for v in row[2:]])
    _say(f"[sweep] wrote {path}")
    return rows


# ---------------------------------------------------------------------------
# chat


def run_chat(cfg: TrainConfig, out, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def emit(line):
        print(line, file=stdout, flush=True)

    corpus, vocab, mcfg = load_world(cfg, out)
    params = _load_stage(out, "rerank")
    prefix = _enc_prefix(params)
    cache, sqd_cache = _caches(params, mcfg, vocab, corpus.pool, prefix)
    emit(f"[chat] ready; retrieving {cfg.m}, generating {cfg.n}, "
         f"showing top {cfg.k} (blank line is ignored, EOF exits)")
    for line in stdin:
        text = line.strip()
        if not text:
            emit("(empty query ignored)")
            continue
        pair = DialoguePair(context=[], query=text, response="")
        rng = np.random.default_rng([cfg.seed, seeds.CHAT,
                                     zlib.crc32(text.encode())])
        cands, query_text = build_candidate_set(
            params, mcfg, vocab, pair, corpus.pool, cache, None, cfg.m,
            cfg.n, not cfg.no_kg, rng, cfg.max_gen_len, prefix,
            include_truth=False, sqd_cache=sqd_cache)
        q_ids = encode_text(query_text, vocab, mcfg.max_seq_len)
        ranked = rerank(params, mcfg, q_ids, cands)
        k = min(cfg.k, len(ranked))
        emit(f"response: {decode_ids(ranked[0].tokens, vocab)}")
        emit(f"top {k} candidates:")
        for r, c in enumerate(ranked[:k], start=1):
            emit(f"  {r}. [{c.provenance} {c.score:.4f}] "
                 f"{decode_ids(c.tokens, vocab)}")
    return 0
