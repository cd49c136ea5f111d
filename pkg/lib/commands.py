"""
CLI verbs. Each cmd_* takes the resolved Config and the parsed arguments and
returns a process exit code; library errors propagate to hgrn.main.
"""

import csv
import logging
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import psutil
from tqdm import tqdm

from lib.checkpoint import load_checkpoint
from lib.database import RunLedger
from lib.errors import ConfigError, ContractError, SizeError
from lib.model import HGRN, ModelConfig
from lib.scan import (
    ComplexSeq,
    DecaySeq,
    export_mixing_csv,
    mixing_matrix,
    parallel_scan,
    sequential_scan,
    toeplitz_deviation,
)
from lib.stats import GateStatsAccumulator, write_gate_stats_csv
from lib.suites import SuiteLookup
from lib.tasks import (
    corpus_stream,
    corpus_windows,
    load_byte_corpus,
    stationary_bytes,
    task_batch,
    task_stream,
)
from lib.tensor import get_dtype, precision
from lib.training import (
    METRICS_COLUMNS,
    VAL_INDEX_OFFSET,
    TINY_MODEL,
    evaluate_ppl,
    evaluate_task,
    gradient_check_model,
    train,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
TOEPLITZ_BREAK = 1e-3
TOEPLITZ_EXACT = 1e-12
AGREEMENT_TOLERANCE = {'f64': 1e-10, 'f32': 1e-4}
CORRUPT_FAULT = ('recurrence', 1, 2.0)


class RunContext:
    """
    Run directory with the resolved config, a run.log file handler and a
    ledger row. Used as a context manager; a raised error marks the run failed.
    """

    def __init__(self, config, command, name=None, root=None):
        self.config = config
        self.command = command
        out_root = config.get_out_root()
        base = Path(root) if root else out_root
        label = name or config.get('run.name') or f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"
        self.dir = self._unique_dir(base, label)
        self.ledger = RunLedger(out_root / config.get('run.ledger', 'ledger.db'))
        self.run_id = None
        self.handler = None
        self.status = None

    @staticmethod
    def _unique_dir(base, label):
        candidate = base / label
        suffix = 1
        while candidate.exists():
            candidate = base / f"{label}-{suffix}"
            suffix += 1
        candidate.mkdir(parents=True)
        return candidate

    def __enter__(self):
        self.config.dump(self.dir / 'config.resolved.json')
        self.handler = logging.FileHandler(self.dir / 'run.log')
        self.handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(self.handler)
        self.run_id = self.ledger.start_run(self.dir.name, self.command, self.dir, self.config.to_dict())
        logger.info(f"Run directory: {self.dir}")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.ledger.finish_run(self.run_id, 'failed', str(exc))
        elif self.status is None:
            self.ledger.finish_run(self.run_id, 'completed')
        logging.getLogger().removeHandler(self.handler)
        self.handler.close()
        return False

    def record_metrics(self, record):
        self.ledger.add_metrics(self.run_id, record)

    def mark(self, status, message=None):
        self.status = status
        self.ledger.finish_run(self.run_id, status, message)


# -- data plumbing ------------------------------------------------------------------

def resolve_corpus(config, path=None):
    """Train/val byte streams from a corpus file, or from the stationary source"""
    path = path or config.get('task.corpus')
    ratio = config.get('task.split_ratio')
    if path:
        return load_byte_corpus(path, ratio)
    length = config.get('task.stationary_bytes')
    logger.info(f"No corpus configured, using {length} bytes of the stationary synthetic source")
    tokens = stationary_bytes(length, config.get('train.seed'), config.get('task.stationary_alphabet'))
    cut = int(len(tokens) * ratio)
    return tokens[:cut], tokens[cut:]


def build_training_data(config, corpus_path=None):
    """(batch stream, validate callable) for the configured task"""
    cfg = config.train_config()
    spec = config.task_spec()
    if spec.kind == 'byte_lm':
        train_tokens, val_tokens = resolve_corpus(config, corpus_path)
        val_tokens = val_tokens[:cfg.val_batches * cfg.batch_size * cfg.seq_len + 1]
        stream = corpus_stream(train_tokens, cfg.seq_len, cfg.batch_size, cfg.seed)
        return stream, lambda model: evaluate_ppl(model, val_tokens, cfg.seq_len, cfg.batch_size)
    samples = config.get('task.val_samples')
    stream = task_stream(spec, cfg.batch_size)
    return stream, lambda model: evaluate_task(model, spec, samples, cfg.batch_size)


def sample_batches(config, model_batches, corpus_path=None, seq_len=None):
    """Evaluation inputs: validation windows of the corpus or held-out task samples"""
    cfg = config.train_config()
    spec = config.task_spec()
    seq_len = seq_len or cfg.seq_len
    if spec.kind == 'byte_lm':
        _, val_tokens = resolve_corpus(config, corpus_path)
        windows = corpus_windows(val_tokens, seq_len)
        windows = windows[:model_batches * cfg.batch_size]
        return [
            np.stack([w[0] for w in windows[i:i + cfg.batch_size]])
            for i in range(0, len(windows), cfg.batch_size)
        ]
    return [
        task_batch(spec, cfg.batch_size, VAL_INDEX_OFFSET + i * cfg.batch_size)[0]
        for i in range(model_batches)
    ]


def collect_gate_stats(model, batches):
    accumulator = GateStatsAccumulator(model.cfg.layers)
    for tokens in batches:
        records = []
        model.forward(tokens, records)
        accumulator.update(records)
    return accumulator.result()


def layer_mixing(record, n, cap):
    """Mixing matrix of the first batch lane of one layer record"""
    lam = record.lam[0][:n]
    theta = record.theta if record.theta.ndim == 1 else record.theta[0][:n]
    return mixing_matrix(DecaySeq(lam, theta), lam.shape[0], cap)


def _write_csv(path, header, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def _load_model(config, checkpoint):
    if not checkpoint:
        raise ConfigError("--checkpoint is required")
    return load_checkpoint(checkpoint, expected_cfg=config.model_config())


# -- verbs ---------------------------------------------------------------------

def _train_run(config, ctx):
    cfg = config.train_config()
    with precision(cfg.precision):
        model = HGRN.initialize(config.model_config(), cfg.seed)
        stream, validate = build_training_data(config)
        result = train(model, stream, cfg, validate, ctx.dir, ctx.record_metrics)
    return model, result


def cmd_train(config, args):
    with RunContext(config, 'train') as ctx:
        _, result = _train_run(config, ctx)
        logger.info(f"Training finished, best val loss {result.best_val_loss:.4f}")
        logger.info(f"Checkpoints: {result.best_checkpoint}, {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(config, args):
    cfg = config.train_config()
    spec = config.task_spec()
    with RunContext(config, 'eval') as ctx, precision(cfg.precision):
        model = _load_model(config, args.checkpoint)
        if spec.kind == 'byte_lm':
            _, val_tokens = resolve_corpus(config, args.corpus)
            record = evaluate_ppl(model, val_tokens, cfg.seq_len, cfg.batch_size)
        else:
            record = evaluate_task(model, spec, config.get('task.val_samples'), cfg.batch_size)
        ctx.record_metrics(record)
        _write_csv(ctx.dir / 'eval.csv', METRICS_COLUMNS, [record.as_row()])
        summary = f"val_loss={record.val_loss:.6f} val_ppl={record.val_ppl:.4f}"
        if record.val_accuracy is not None:
            summary += f" val_accuracy={record.val_accuracy:.4f}"
        logger.info(summary)
    return EXIT_OK


def cmd_extrapolate(config, args):
    cfg = config.train_config()
    lengths = args.lengths or config.get('instrumentation.extrapolate_lengths')
    if not lengths or any(length < 1 for length in lengths):
        raise ContractError(f"extrapolation lengths must all be >= 1, got {lengths}")
    with RunContext(config, 'extrapolate') as ctx, precision(cfg.precision):
        model = _load_model(config, args.checkpoint)
        _, val_tokens = resolve_corpus(config, args.corpus)
        rows = []
        for length in tqdm(lengths, desc='extrapolate', unit='length', leave=False):
            record = evaluate_ppl(model, val_tokens, length, cfg.batch_size)
            logger.info(f"length {length}: ppl {record.val_ppl:.4f}")
            rows.append([length, repr(record.val_ppl)])
        _write_csv(ctx.dir / 'extrapolate.csv', ['length', 'ppl'], rows)
        base = float(rows[0][1])
        for length, ppl in rows[1:]:
            logger.info(f"ppl ratio {length}/{lengths[0]}: {float(ppl) / base:.4f}")
    return EXIT_OK


def cmd_gate_stats(config, args):
    cfg = config.train_config()
    with RunContext(config, 'gate-stats') as ctx, precision(cfg.precision):
        model = _load_model(config, args.checkpoint)
        batches = sample_batches(config, config.get('instrumentation.stats_batches'), args.corpus)
        stats = collect_gate_stats(model, batches)
        out_csv = Path(args.out_csv) if args.out_csv else ctx.dir / 'gate_stats.csv'
        write_gate_stats_csv(stats, out_csv)
        if model.cfg.lower_bound_mode == 'only':
            logger.info("Decay is data-independent in this model (closest analog of eigenvalue-based LRU statistics)")
        for s in stats:
            logger.info(
                f"layer {s.layer}: mean {s.mean:.4f} median {s.median:.4f} "
                f"(gamma mean {s.gamma_mean:.4f}, {s.count} gate values)"
            )
            if s.mean < s.gamma_mean - 1e-6 and model.cfg.lower_bound_mode != 'none':
                logger.warning(f"layer {s.layer}: mean gate value falls below its lower bound")
    return EXIT_OK


def _bench_inputs(rng, n, d, dtype):
    decay = DecaySeq(rng.uniform(0.0, 1.0, size=(n, d)).astype(dtype), rng.uniform(-np.pi, np.pi, size=d).astype(dtype))
    c = ComplexSeq(rng.standard_normal((n, d)).astype(dtype), rng.standard_normal((n, d)).astype(dtype))
    return decay, c


def _bench_bytes(n, d, itemsize):
    padded = 1 << max(n - 1, 0).bit_length()
    # four planes for the tree, four for inputs and outputs of both paths
    return 12 * padded * d * itemsize


def cmd_scan_bench(config, args):
    scan_cfg = config.scan_config()
    lengths = args.lengths or scan_cfg.bench_lengths
    d = args.width or scan_cfg.bench_width
    repeats = args.repeats or scan_cfg.bench_repeats
    with RunContext(config, 'scan-bench') as ctx, precision(config.get('train.precision')):
        dtype = get_dtype()
        budget = psutil.virtual_memory().available * scan_cfg.bench_memory_fraction
        for n in lengths:
            if n < 1:
                raise ContractError(f"benchmark lengths must be >= 1, got {n}")
            needed = _bench_bytes(n, d, np.dtype(dtype).itemsize)
            if needed > budget:
                raise SizeError(f"length {n} at width {d} needs ~{needed / 2**20:.0f} MiB, budget is {budget / 2**20:.0f} MiB")

        rng = np.random.default_rng(config.get('train.seed'))
        inputs = {n: _bench_inputs(rng, n, d, dtype) for n in lengths}
        tolerance = AGREEMENT_TOLERANCE[config.get('train.precision')]
        for n, (decay, c) in inputs.items():
            seq = sequential_scan(decay, c)
            par = parallel_scan(decay, c)
            scale = max(float(seq.magnitude().max()), 1e-12)
            error = max(float(np.abs(seq.re - par.re).max()), float(np.abs(seq.im - par.im).max())) / scale
            if error > tolerance:
                logger.error(f"length {n}: sequential and parallel scans disagree (relative error {error:.3e})")
                ctx.mark('failed', f"scan disagreement at length {n}")
                return EXIT_FAILURE
            logger.debug(f"length {n}: scans agree to {error:.3e}")

        rows = []
        for n in tqdm(lengths, desc='scan-bench', unit='length', leave=False):
            decay, c = inputs[n]
            timings = {}
            for name, fn in (('sequential', sequential_scan), ('parallel', parallel_scan)):
                samples = []
                for _ in range(repeats):
                    started = time.perf_counter()
                    fn(decay, c)
                    samples.append((time.perf_counter() - started) * 1000.0)
                timings[name] = float(np.median(samples))
            logger.info(f"length {n}: sequential {timings['sequential']:.3f} ms, parallel {timings['parallel']:.3f} ms")
            rows.append([n, repr(timings['sequential']), repr(timings['parallel'])])
        _write_csv(ctx.dir / 'scan_bench.csv', ['length', 'sequential_ms', 'parallel_ms'], rows)
    return EXIT_OK


def gradcheck_config(config):
    """The tiny fixture with the configured ablation switches"""
    data = config.model_config().to_dict()
    data.update(TINY_MODEL)
    data['glu_expansion'] = None
    return ModelConfig.from_dict(data)


def cmd_gradcheck(config, args):
    tolerance = args.tolerance if args.tolerance is not None else config.get('instrumentation.gradcheck_tolerance')
    with RunContext(config, 'gradcheck') as ctx:
        report = gradient_check_model(
            gradcheck_config(config),
            tolerance=tolerance,
            frozen=tuple(args.freeze or ()),
            corrupt=CORRUPT_FAULT if args.corrupt else None,
            seed=config.get('train.seed'),
        )
        rows = []
        for entry in report.entries:
            error = '' if entry.max_rel_error is None else f"{entry.max_rel_error:.3e}"
            logger.info(f"{entry.status:4}  {entry.name:40} {error}")
            rows.append([entry.name, entry.size, '' if entry.max_rel_error is None else repr(entry.max_rel_error), entry.status])
        _write_csv(ctx.dir / 'gradcheck.csv', ['parameter', 'size', 'max_rel_error', 'status'], rows)
        verdict = 'PASS' if report.passed else 'FAIL'
        logger.info(f"{verdict}: max relative error {report.max_rel_error:.3e} (tolerance {tolerance:g})")
        if not report.passed:
            logger.error(f"Gradient check failed for: {', '.join(report.failing())}")
            ctx.mark('failed', 'gradient check failed')
            return EXIT_FAILURE
    return EXIT_OK


ABLATE_COLUMNS = [
    'variant', 'seeds', 'val_loss', 'val_ppl', 'val_accuracy',
    'lambda_mean_first', 'lambda_mean_top', 'toeplitz_deviation',
]


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def _cell(value):
    return '' if value is None else repr(value)


def cmd_ablate(config, args):
    lookup = SuiteLookup()
    variants = lookup.variants(args.suite)
    seeds = args.seeds or [config.get('train.seed')]
    cap = config.get('scan.materialize_cap')
    mixing_len = config.get('instrumentation.mixing_len')
    rows, failures = [], []
    with RunContext(config, f'ablate-{args.suite}') as suite_ctx:
        for variant in tqdm(variants, desc=f'ablate {args.suite}', unit='variant'):
            results = []
            for seed in seeds:
                extra = lookup.override_args(args.suite, variant['name']) + [f'train.seed={seed}']
                variant_config = config.derive(extra)
                with RunContext(variant_config, 'train', f"{variant['name']}-seed{seed}", suite_ctx.dir) as ctx:
                    model, _ = _train_run(variant_config, ctx)
                    final = ctx.ledger.final_metrics(ctx.run_id)
                    with precision(variant_config.get('train.precision')):
                        batches = sample_batches(variant_config, 1)
                        stats = collect_gate_stats(model, batches)
                        records = []
                        model.forward(batches[0][:1, :mixing_len], records)
                        deviation = max(toeplitz_deviation(layer_mixing(r, mixing_len, cap)) for r in records)
                results.append({
                    'val_loss': final['val_loss'], 'val_ppl': final['val_ppl'],
                    'val_accuracy': final['val_accuracy'],
                    'first': stats[0].mean, 'top': stats[-1].mean, 'toeplitz': deviation,
                })
                logger.info(f"{variant['name']} seed {seed}: val_loss {final['val_loss']} toeplitz deviation {deviation:.3e}")

            deviation = max(r['toeplitz'] for r in results)
            if variant.get('expect_non_toeplitz'):
                if deviation <= TOEPLITZ_BREAK:
                    failures.append(f"{variant['name']}: expected a non-Toeplitz phase matrix, deviation {deviation:.3e}")
            elif deviation > TOEPLITZ_EXACT:
                failures.append(f"{variant['name']}: phase matrix should be Toeplitz, deviation {deviation:.3e}")
            rows.append([
                variant['name'], len(seeds),
                _cell(_median([r['val_loss'] for r in results])),
                _cell(_median([r['val_ppl'] for r in results])),
                _cell(_median([r['val_accuracy'] for r in results])),
                _cell(_median([r['first'] for r in results])),
                _cell(_median([r['top'] for r in results])),
                _cell(deviation),
            ])
        _write_csv(suite_ctx.dir / 'ablate.csv', ABLATE_COLUMNS, rows)
        if failures:
            for failure in failures:
                logger.error(failure)
            suite_ctx.mark('failed', '; '.join(failures))
            return EXIT_FAILURE
    return EXIT_OK


def cmd_export_mixing(config, args):
    cfg = config.train_config()
    dims = args.dims or config.get('instrumentation.mixing_dims')
    n = args.length or config.get('instrumentation.mixing_len')
    with RunContext(config, 'export-mixing') as ctx, precision(cfg.precision):
        model = _load_model(config, args.checkpoint)
        tokens = sample_batches(config, 1, args.corpus, seq_len=n)[0][:1, :n]
        records = []
        model.forward(tokens, records)
        for k, record in enumerate(records):
            mix = layer_mixing(record, n, config.get('scan.materialize_cap'))
            export_mixing_csv(mix, dims, ctx.dir, prefix=f'layer{k + 1}')
            logger.info(f"layer {k + 1}: phase Toeplitz deviation {toeplitz_deviation(mix):.3e}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'eval': cmd_eval,
    'extrapolate': cmd_extrapolate,
    'gate-stats': cmd_gate_stats,
    'scan-bench': cmd_scan_bench,
    'gradcheck': cmd_gradcheck,
    'ablate': cmd_ablate,
    'export-mixing': cmd_export_mixing,
}
