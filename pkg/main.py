#!/usr/bin/env python
"""dayembed command line.

Turns activity event logs into day-strings, trains the day encoder, embeds
days and runs the analyses over the embeddings. Every subcommand writes into
--out-dir (default: $DAYEMBED_OUTPUT_DIR or ./output) together with a
``<subcommand>.manifest.json``.

Examples:
  python main.py synth --seed 1 --preset two-regime
  python main.py daystrings --events output/events.csv
  python main.py train --corpus output/daystrings.jsonl --epochs 1
  python main.py embed --corpus output/daystrings.jsonl --checkpoint output/model.ckpt
  python main.py sweep-k --embeddings output/embeddings.jsonl
  python main.py search --embeddings output/embeddings.jsonl --participant p1 --date 2022-01-01 --top-k 9

Hyperparameters can also come from --config FILE (key=value lines using the
field names, e.g. batch_size=64); explicit flags win over the file, and
--paper-mode starts from the published settings.
"""

import argparse
import datetime
import json
import logging
import os
import sys
import traceback
from typing import Dict, List, Optional

import numpy as np

import analytics
import cluster
import daystring
import encoder
import ingest
import settings
import store
import synth
import trainer
import tsne
from csv_helper import write_csv
from errors import ConfigError, PipelineError
from runs import RunManifest

logger = logging.getLogger(__name__)

TSNE_LR_KEY = 'tsne_learning_rate'


# ----------------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------------
def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"--{what} is required")
    if not os.path.isfile(path):
        raise ConfigError(f"Input file not found: {path}")
    return path


def _out(args, name: str) -> str:
    return os.path.join(args.out_dir, name)


def _parse_date(raw: str) -> datetime.date:
    try:
        return datetime.date.fromisoformat(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid date {raw!r} (expected YYYY-MM-DD)")


CONFIG_KINDS = (encoder.EncoderConfig, trainer.TrainConfig, cluster.KMeansConfig, tsne.TsneConfig,
                synth.CohortConfig)


def _overrides(args) -> Dict[str, object]:
    """Config values in precedence order: --paper-mode presets, config file, flags."""
    values: Dict[str, object] = {}
    if args.paper_mode:
        values.update(settings.PAPER_MODE)
    from_file = settings.load_config_file(args.config)
    defaults = [kind() for kind in CONFIG_KINDS]
    settings.check_known_keys(from_file, *defaults, extra=[TSNE_LR_KEY])
    values.update(from_file)
    for key in {TSNE_LR_KEY}.union(*(d.__dataclass_fields__ for d in defaults)):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _resolve_seed(args) -> int:
    """--seed wins, then seed=N from --config, then 0."""
    if args.seed is not None:
        return args.seed
    raw = settings.load_config_file(args.config).get('seed')
    if not raw:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"Invalid value for seed: {raw!r}")


def _config(kind, values: Dict[str, object], seed: Optional[int] = None):
    values = dict(values)
    if kind is tsne.TsneConfig:
        values.pop('learning_rate', None)
        if TSNE_LR_KEY in values:
            values['learning_rate'] = values.pop(TSNE_LR_KEY)
    if seed is not None and 'seed' in kind.__dataclass_fields__:
        values['seed'] = seed
    return settings.apply_overrides(kind(), values)


def _finish(args, manifest: RunManifest, outputs: List[str]):
    for path in outputs:
        manifest.add_output(path)
        print(f"[OK] wrote {path}")
    manifest.write(args.out_dir)
    return 0


def vars_of(config) -> Dict[str, object]:
    return {name: getattr(config, name) for name in config.__dataclass_fields__}


def _load_store(args) -> store.EmbeddingStore:
    return store.load_store(_require(args.embeddings, 'embeddings'))


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------
def cmd_synth(args) -> int:
    presets = {
        'default': synth.CohortConfig,
        'two-regime': synth.CohortConfig.two_regime,
        'paper': synth.CohortConfig.paper_scale,
    }
    base = presets[args.preset]()
    values = {k: v for k, v in _overrides(args).items() if k in base.__dataclass_fields__}
    values['seed'] = args.seed
    config = settings.apply_overrides(base, values)
    cohort = synth.generate_cohort(config)
    paths = synth.write_cohort(cohort, args.out_dir)
    manifest = RunManifest('synth', config.to_dict(), args.seed)
    return _finish(args, manifest, list(paths.values()))


def cmd_ingest(args) -> int:
    events = ingest.load_events(_require(args.events, 'events'))
    report = ingest.validate_events(events)
    days = ingest.group_days(events)
    result = {"events": len(events), "days": len(days), "validation": report.to_dict()}
    if args.labels:
        labels = ingest.load_labels(_require(args.labels, 'labels'))
        result["labels"] = len(labels)
    path = _out(args, 'validation.json')
    os.makedirs(args.out_dir, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write('\n')
    print(f"[INFO] {len(events)} events over {len(days)} days, {report.total} validation finding(s)")
    manifest = RunManifest('ingest', {}, None)
    manifest.add_inputs([args.events, args.labels])
    return _finish(args, manifest, [path])


def cmd_daystrings(args) -> int:
    events = ingest.load_events(_require(args.events, 'events'))
    days = ingest.group_days(events)
    if args.dense:
        days = ingest.densify_days(days)
    vocab = daystring.Vocabulary.default()
    corpus = daystring.build_corpus(days, vocab, args.seed, args.window_minutes)
    path = _out(args, 'daystrings.jsonl')
    daystring.write_corpus(path, corpus)
    manifest = RunManifest('daystrings', {"dense": args.dense, "window_minutes": args.window_minutes}, args.seed)
    manifest.add_inputs([args.events])
    return _finish(args, manifest, [path])


def _parse_aliases(pairs: Optional[List[str]]) -> Dict[str, str]:
    aliases = {}
    for pair in pairs or []:
        token, sep, word = pair.partition('=')
        if not sep or not token or not word:
            raise ConfigError(f"--alias expects TOKEN=WORD, got {pair!r}")
        aliases[token] = word
    return aliases


def cmd_train(args) -> int:
    vocab = daystring.Vocabulary.default()
    corpus = daystring.read_corpus(_require(args.corpus, 'corpus'), vocab)
    values = _overrides(args)
    if values.get('epochs') is None:
        raise ConfigError("--epochs is required (or epochs=N in --config)")
    values['vocab_size'] = vocab.size
    enc_config = _config(encoder.EncoderConfig, values)
    train_config = _config(trainer.TrainConfig, values, seed=args.seed)
    params = encoder.init_params(enc_config, settings.derive_seed(args.seed, 'encoder'))
    if args.pretrained:
        encoder.load_pretrained_token_embeddings(_require(args.pretrained, 'pretrained'), vocab, params,
                                                 _parse_aliases(args.alias))
    params, history = trainer.train(corpus, enc_config, train_config, vocab, params,
                                    checkpoint_dir=_out(args, 'checkpoints'))
    model_path = _out(args, 'model.ckpt')
    encoder.save_checkpoint(params, enc_config, model_path)
    loss_path = _out(args, 'loss_history.csv')
    trainer.write_loss_history(history, loss_path)
    manifest = RunManifest('train', {"encoder": enc_config.to_dict(), "trainer": vars_of(train_config)}, args.seed)
    manifest.add_inputs([args.corpus, args.pretrained])
    return _finish(args, manifest, [model_path, loss_path])


def cmd_embed(args) -> int:
    vocab = daystring.Vocabulary.default()
    corpus = daystring.read_corpus(_require(args.corpus, 'corpus'), vocab)
    if args.checkpoint:
        params, enc_config = encoder.load_checkpoint(_require(args.checkpoint, 'checkpoint'))
    else:
        values = _overrides(args)
        values['vocab_size'] = vocab.size
        enc_config = _config(encoder.EncoderConfig, values)
        params = encoder.init_params(enc_config, settings.derive_seed(args.seed, 'encoder'))
        print("[INFO] no checkpoint given; embedding with the untrained base encoder")
    embeddings = encoder.embed_corpus(params, enc_config, corpus, vocab)
    path = _out(args, 'embeddings.jsonl')
    store.save_store(embeddings, path)
    manifest = RunManifest('embed', {"encoder": enc_config.to_dict(), "base_model": not args.checkpoint}, args.seed)
    manifest.add_inputs([args.corpus, args.checkpoint])
    return _finish(args, manifest, [path])


def cmd_cluster(args) -> int:
    embeddings = _load_store(args)
    config = _config(cluster.KMeansConfig, _overrides(args))
    rng = np.random.default_rng(settings.derive_seed(args.seed, 'cluster', str(config.k)))
    model = cluster.fit_clusters(embeddings.vectors, config.k, rng, restarts=config.restarts)
    path = _out(args, 'assignments.csv')
    cluster.write_assignments(path, embeddings.keys, model.labels)
    print(f"[INFO] k={model.k} inertia={model.inertia:.4f} silhouette={model.silhouette}")
    manifest = RunManifest('cluster', {**vars_of(config), "silhouette": model.silhouette}, args.seed)
    manifest.add_inputs([args.embeddings])
    return _finish(args, manifest, [path])


def cmd_sweep_k(args) -> int:
    embeddings = _load_store(args)
    config = _config(cluster.KMeansConfig, _overrides(args))
    rng = np.random.default_rng(settings.derive_seed(args.seed, 'cluster', 'sweep'))
    result = cluster.sweep_k(embeddings.vectors, rng, config.k_range, restarts=config.restarts)
    path = _out(args, 'sweep.csv')
    cluster.write_sweep(path, result)
    best_path = _out(args, f'assignments_k{result.best_k}.csv')
    cluster.write_assignments(best_path, embeddings.keys, result.models[result.best_k].labels)
    print(f"[INFO] best k by silhouette: {result.best_k}")
    manifest = RunManifest('sweep-k', {**vars_of(config), "best_k": result.best_k}, args.seed)
    manifest.add_inputs([args.embeddings])
    return _finish(args, manifest, [path, best_path])


def cmd_search(args) -> int:
    embeddings = _load_store(args)
    if not args.participant or not args.date:
        raise ConfigError("--participant and --date are required")
    hits = analytics.search(embeddings, (args.participant, args.date), top_k=args.top_k,
                            exclude_self=not args.include_self)
    path = _out(args, 'search.csv')
    analytics.write_search_results(path, hits)
    manifest = RunManifest('search', {"participant": args.participant, "date": args.date.isoformat(),
                                      "top_k": args.top_k, "include_self": args.include_self}, None)
    manifest.add_inputs([args.embeddings])
    return _finish(args, manifest, [path])


def cmd_similarity(args) -> int:
    embeddings = _load_store(args)
    participants = args.participant
    if not participants:
        participants = [p for p in embeddings.participants
                        if len(embeddings.participant_rows(p)[::args.stride]) >= 2][:10]
    outputs = []
    for pid in participants:
        sm = analytics.participant_similarity_matrix(embeddings, pid, args.stride)
        path = _out(args, f'similarity_{pid}.csv')
        analytics.write_similarity_matrix(path, sm)
        outputs.append(path)
    manifest = RunManifest('similarity', {"participants": participants, "stride": args.stride}, None)
    manifest.add_inputs([args.embeddings])
    return _finish(args, manifest, outputs)


def cmd_label_sim(args) -> int:
    embeddings = _load_store(args)
    labels = ingest.load_labels(_require(args.labels, 'labels'))
    report = analytics.label_similarity(embeddings, labels)
    path = _out(args, 'label_similarity.csv')
    analytics.write_label_similarity(path, report)
    if report.n_participants:
        print(f"[INFO] positive-positive {report.pos_pos_mean:.2f} ± {report.pos_pos_std:.2f}, "
              f"positive-negative {report.pos_neg_mean:.2f} ± {report.pos_neg_std:.2f} "
              f"over {report.n_participants} participant(s)")
    else:
        print("[INFO] no participant has two positive and one negative labelled day")
    manifest = RunManifest('label-sim', report.to_dict(), None)
    manifest.add_inputs([args.embeddings, args.labels])
    return _finish(args, manifest, [path])


def cmd_proportions(args) -> int:
    assignments = cluster.read_assignments(_require(args.assignments, 'assignments'))
    table = analytics.cluster_proportions(assignments, args.k)
    path = _out(args, 'proportions.csv')
    analytics.write_proportions(path, table)
    manifest = RunManifest('proportions', {"k": args.k}, None)
    manifest.add_inputs([args.assignments])
    return _finish(args, manifest, [path])


def cmd_timeline(args) -> int:
    assignments = cluster.read_assignments(_require(args.assignments, 'assignments'))
    participants = args.participant or sorted({pid for pid, _ in assignments})
    timelines = {pid: cluster.cluster_timeline(assignments, pid) for pid in participants}
    path = _out(args, 'timeline.csv')
    cluster.write_timeline(path, timelines)
    switches = sum(1 for t in timelines.values() for a, b in zip(t, t[1:]) if a[1] != b[1])
    print(f"[INFO] {len(timelines)} participant(s), {switches} day-to-day cluster change(s)")
    manifest = RunManifest('timeline', {"participants": sorted(participants)}, None)
    manifest.add_inputs([args.assignments])
    return _finish(args, manifest, [path])


def cmd_tsne(args) -> int:
    embeddings = _load_store(args)
    config = _config(tsne.TsneConfig, _overrides(args), seed=args.seed)
    rng = np.random.default_rng(settings.derive_seed(args.seed, 'tsne', 'sample'))
    rows = tsne.sample_rows(len(embeddings), args.sample, rng)
    keys = [embeddings.keys[i] for i in rows]
    result = tsne.tsne_fit(embeddings.vectors[rows], config)
    coords = _out(args, 'tsne.csv')
    tsne.write_coordinates(coords, keys, result.Y)
    kl_path = _out(args, 'tsne_kl.csv')
    tsne.write_kl_history(kl_path, result)
    outputs = [coords, kl_path]
    if args.journeys:
        journeys = _out(args, 'journeys.csv')
        analytics.write_journeys(journeys, analytics.participant_journeys(result.Y, keys, args.journeys))
        outputs.append(journeys)
    manifest = RunManifest('tsne', {**config.to_dict(), "sample": args.sample, "journeys": args.journeys,
                                    "resolved_learning_rate": result.learning_rate}, args.seed)
    manifest.add_inputs([args.embeddings])
    return _finish(args, manifest, outputs)


def cmd_inspect_cluster(args) -> int:
    assignments = cluster.read_assignments(_require(args.assignments, 'assignments'))
    corpus = daystring.read_corpus(_require(args.corpus, 'corpus'))
    rng = np.random.default_rng(settings.derive_seed(args.seed, 'inspect', str(args.cluster)))
    sample = analytics.cluster_sample(assignments, corpus, args.cluster, args.n, rng)
    for record in sample:
        print(f"{record.participant_id} {record.date.isoformat()}: {record.text}")
    path = _out(args, f'cluster_{args.cluster}_sample.csv')
    write_csv(path, (r.to_dict() for r in sample), ["participant_id", "date", "text"])
    manifest = RunManifest('inspect-cluster', {"cluster": args.cluster, "n": args.n}, args.seed)
    manifest.add_inputs([args.assignments, args.corpus])
    return _finish(args, manifest, [path])


def cmd_summary(args) -> int:
    events = ingest.load_events(_require(args.events, 'events'))
    summary = ingest.summarize_cohort(ingest.group_days(events))
    for key, value in summary.to_dict().items():
        print(f"[INFO] {key}: {value}")
    hist_path = _out(args, 'location_histogram.csv')
    table = ingest.location_histogram(events, args.bin_minutes)
    os.makedirs(args.out_dir, exist_ok=True)
    table.to_csv(hist_path, index=False, lineterminator='\n')
    manifest = RunManifest('summary', {**summary.to_dict(), "bin_minutes": args.bin_minutes}, None)
    manifest.add_inputs([args.events])
    return _finish(args, manifest, [hist_path])


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Single seed for all randomness (default: seed= in --config, else 0)')
    common.add_argument('--config', help='File of key=value hyperparameter overrides')
    common.add_argument('--paper-mode', action='store_true', help='Start from the published hyperparameters')
    common.add_argument('--out-dir', default=settings.OUTPUT_DIR, help='Directory for outputs')

    p = argparse.ArgumentParser(description='Day-string embedding pipeline')
    sub = p.add_subparsers(dest='command', metavar='command')
    sub.required = True

    def add(name, handler, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(handler=handler)
        return sp

    sp = add('synth', cmd_synth, 'Generate a synthetic cohort')
    sp.add_argument('--preset', choices=['default', 'two-regime', 'paper'], default='default')
    sp.add_argument('--participants', dest='n_participants', type=int)
    sp.add_argument('--days', type=int)
    sp.add_argument('--regimes', dest='n_regimes', type=int)
    sp.add_argument('--switch-probability', dest='switch_probability', type=float)
    sp.add_argument('--label-rate', dest='label_rate', type=float)

    sp = add('ingest', cmd_ingest, 'Parse and validate event and label files')
    sp.add_argument('--events')
    sp.add_argument('--labels')

    sp = add('daystrings', cmd_daystrings, 'Build the day-string corpus')
    sp.add_argument('--events')
    sp.add_argument('--dense', action='store_true', help='Emit all-Nowhere strings for missing days')
    sp.add_argument('--window-minutes', type=int, default=daystring.WINDOW_MINUTES)

    sp = add('train', cmd_train, 'Train the encoder with the triplet objective')
    sp.add_argument('--corpus')
    sp.add_argument('--epochs', type=int)
    sp.add_argument('--triplets-per-epoch', dest='triplets_per_epoch', type=int)
    sp.add_argument('--batch-size', dest='batch_size', type=int)
    sp.add_argument('--lr', dest='learning_rate', type=float)
    sp.add_argument('--weight-decay', dest='weight_decay', type=float)
    sp.add_argument('--warmup', dest='warmup_steps', type=int)
    sp.add_argument('--total-steps', dest='total_steps', type=int)
    sp.add_argument('--margin', type=float)
    sp.add_argument('--negative-mode', dest='negative_mode', choices=['day', 'participant'])
    sp.add_argument('--d-model', dest='d_model', type=int)
    sp.add_argument('--layers', dest='n_layers', type=int)
    sp.add_argument('--heads', dest='n_heads', type=int)
    sp.add_argument('--d-ff', dest='d_ff', type=int)
    sp.add_argument('--pretrained', help='Word-vector text file for the token embeddings')
    sp.add_argument('--alias', action='append', help='TOKEN=WORD lookup alias for --pretrained')

    sp = add('embed', cmd_embed, 'Embed a corpus into an embedding store')
    sp.add_argument('--corpus')
    sp.add_argument('--checkpoint', help='Trained model; the base encoder is used when omitted')
    sp.add_argument('--d-model', dest='d_model', type=int)
    sp.add_argument('--layers', dest='n_layers', type=int)
    sp.add_argument('--heads', dest='n_heads', type=int)
    sp.add_argument('--d-ff', dest='d_ff', type=int)

    sp = add('cluster', cmd_cluster, 'Fit k-means with a fixed k')
    sp.add_argument('--embeddings')
    sp.add_argument('--k', type=int)
    sp.add_argument('--restarts', type=int)

    sp = add('sweep-k', cmd_sweep_k, 'Fit k-means over a range of k and score by silhouette')
    sp.add_argument('--embeddings')
    sp.add_argument('--k-min', dest='k_min', type=int)
    sp.add_argument('--k-max', dest='k_max', type=int)
    sp.add_argument('--restarts', type=int)

    sp = add('search', cmd_search, 'Most similar days to a query day')
    sp.add_argument('--embeddings')
    sp.add_argument('--participant')
    sp.add_argument('--date', type=_parse_date)
    sp.add_argument('--top-k', type=int, default=analytics.TOP_K)
    sp.add_argument('--include-self', action='store_true')

    sp = add('similarity', cmd_similarity, 'Per-participant day similarity matrices')
    sp.add_argument('--embeddings')
    sp.add_argument('--participant', action='append')
    sp.add_argument('--stride', type=int, default=analytics.STRIDE)

    sp = add('label-sim', cmd_label_sim, 'Positive/negative labelled day similarity')
    sp.add_argument('--embeddings')
    sp.add_argument('--labels')

    sp = add('proportions', cmd_proportions, 'Daily cluster proportions')
    sp.add_argument('--assignments')
    sp.add_argument('--k', type=int)

    sp = add('timeline', cmd_timeline, 'Date-ordered cluster labels per participant')
    sp.add_argument('--assignments')
    sp.add_argument('--participant', action='append')

    sp = add('tsne', cmd_tsne, 'Project embeddings to 2-D with t-SNE')
    sp.add_argument('--embeddings')
    sp.add_argument('--sample', type=int, help='Project a random subset of N days')
    sp.add_argument('--journeys', type=int, help='Also write paths for the N participants with most days')
    sp.add_argument('--perplexity', type=float)
    sp.add_argument('--exaggeration', dest='early_exaggeration', type=float)
    sp.add_argument('--tsne-lr', dest=TSNE_LR_KEY)
    sp.add_argument('--n-iter', dest='n_iter', type=int)
    sp.add_argument('--exaggeration-iters', dest='exaggeration_iters', type=int)

    sp = add('inspect-cluster', cmd_inspect_cluster, 'Print a random sample of day-strings from one cluster')
    sp.add_argument('--assignments')
    sp.add_argument('--corpus')
    sp.add_argument('--cluster', type=int, required=True)
    sp.add_argument('--n', type=int, default=analytics.SAMPLE_SIZE)

    sp = add('summary', cmd_summary, 'Describe a cohort and write the location histogram')
    sp.add_argument('--events')
    sp.add_argument('--bin-minutes', type=int, default=60)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.DEBUG if settings.DEBUG else logging.INFO)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        args.seed = _resolve_seed(args)
        return args.handler(args)
    except PipelineError as e:
        print(f"[ERROR] {e.detail}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        detail = f"Unexpected error in {args.command}: {e}"
        if settings.DEBUG:
            detail += f"\n{traceback.format_exc()}"
        print(f"[ERROR] {detail}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
