"""
Command-line entry point.

    python src/cli.py <group> <command> [--config FILE] [--set section.key=value ...]

Exit codes: 0 success, 2 config error, 3 data error, 4 training failure,
5 evaluation failure, 1 anything else.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from config import load_config
from errors import ConfigError, PhaseLabError
from eval_metrics import read_prediction_dir
from phase_data import (ANNOTATION_FORMATS, SyntheticSpec, generate_synthetic, load_phase_mapping,
                        write_synthetic)
from pipeline import PhaseRecognitionPipeline, evaluate_directories
from runtime import setup_logging, write_manifest
from visualization import render_prediction_ribbons

logger = logging.getLogger('cli')


def _common_options():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--config', help='TOML or JSON config file')
    parent.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='override one config value')
    parent.add_argument('--seed', type=int, help='replace every seed in the config')
    parent.add_argument('--out', help='output directory (run root for pipeline commands)')
    parent.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING, ...')
    parent.add_argument('--no-progress', action='store_true', help='hide progress bars')
    return parent


def build_parser():
    common = _common_options()
    parser = argparse.ArgumentParser(prog='cli.py', description='Surgical phase recognition lab')
    groups = parser.add_subparsers(dest='group', metavar='GROUP', required=True)

    data = groups.add_parser('data', help='dataset preparation').add_subparsers(
        dest='command', metavar='COMMAND', required=True)
    synth = data.add_parser('synth', parents=[common], help='generate a synthetic dataset')
    synth.add_argument('--spec', help='SyntheticSpec JSON file (default: [synthetic] section)')
    ingest = data.add_parser('ingest', parents=[common],
                             help='convert annotations to the canonical layout')
    ingest.add_argument('--source', required=True, help='dataset root to read')
    ingest.add_argument('--format', required=True, choices=sorted(ANNOTATION_FORMATS))

    stage1 = groups.add_parser('stage1', help='image-encoder and prompt training').add_subparsers(
        dest='command', metavar='COMMAND', required=True)
    stage1.add_parser('train', parents=[common], help='train stage 1')
    stage1.add_parser('lr-search', parents=[common], help='pick the stage-1 learning rate')
    extract = stage1.add_parser('extract', parents=[common], help='write the feature cache')
    extract.add_argument('--split', default='train,val,test',
                         help='comma-separated splits to encode')
    extract.add_argument('--batch-size', type=int)

    stage2 = groups.add_parser('stage2', help='temporal model').add_subparsers(
        dest='command', metavar='COMMAND', required=True)
    stage2.add_parser('train', parents=[common], help='train the causal TCN')
    pred = stage2.add_parser('predict', parents=[common], help='write prediction TSVs')
    pred.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    pred.add_argument('--preds', help='prediction directory (default: <run>/preds)')

    evaluation = groups.add_parser('eval', help='metrics and plots').add_subparsers(
        dest='command', metavar='COMMAND', required=True)
    run = evaluation.add_parser('run', parents=[common], help='score a prediction directory')
    run.add_argument('--preds', required=True, help='directory of <video>.tsv predictions')
    run.add_argument('--gt', help='canonical dataset directory to take ground truth from')
    run.add_argument('--baseline', help='stage-1 framewise prediction directory')
    run.add_argument('--phases', help='phases.json (default: next to --preds)')
    run.add_argument('--no-ribbons', action='store_true')
    ribbon = evaluation.add_parser('ribbon', parents=[common], help='plot one video')
    ribbon.add_argument('--preds', required=True)
    ribbon.add_argument('--video', required=True, action='append')
    ribbon.add_argument('--baseline')
    ribbon.add_argument('--phases')

    pipe = groups.add_parser('pipeline', help='whole-pipeline runs').add_subparsers(
        dest='command', metavar='COMMAND', required=True)
    pipe.add_parser('all', parents=[common], help='synth/ingest through evaluation')
    pipe.add_parser('probe', parents=[common], help='prompt-variant probe over regimes')
    return parser


def _phase_names(args):
    candidates = [args.phases] if args.phases else [
        os.path.join(os.path.dirname(os.path.abspath(args.preds)), 'phases.json'),
        os.path.join(args.preds, 'phases.json'),
    ]
    for path in candidates:
        if path and os.path.exists(path):
            return load_phase_mapping(path)[0].names
    raise ConfigError('No phases.json found; pass --phases')


def _data_synth(args, config, argv):
    if args.spec:
        with open(args.spec, 'r') as f:
            try:
                spec = SyntheticSpec(**json.load(f))
            except (TypeError, json.JSONDecodeError) as e:
                raise ConfigError(f'{args.spec}: invalid synthetic spec ({e})') from e
    elif config.synthetic is not None:
        spec = config.synthetic
    else:
        raise ConfigError('data synth needs --spec or a [synthetic] config section')
    out_dir = args.out or os.path.join(config.out_root, 'data')
    videos = write_synthetic(generate_synthetic(spec), out_dir)
    write_manifest(out_dir, 'data synth', config.to_json(), spec.seed, argv,
                   extra={'synthetic': asdict(spec), 'videos': len(videos)})
    logger.info('Wrote %d synthetic videos to %s', len(videos), out_dir)


def _eval_run(args, config, argv):
    out_dir = args.out or os.path.join(config.out_root, 'report')
    evaluate_directories(args.preds, out_dir, _phase_names(args), baseline_dir=args.baseline,
                         gt_dir=args.gt, ribbons=config.eval.ribbons and not args.no_ribbons,
                         ribbon_videos=config.eval.ribbon_videos)
    write_manifest(out_dir, 'eval run', config.to_json(), config.seed, argv)


def _eval_ribbon(args, config, argv):
    out_dir = args.out or os.path.join(config.out_root, 'report', 'ribbons')
    ground_truth, predictions = read_prediction_dir(args.preds)
    methods = {}
    if args.baseline:
        methods['stage1'] = read_prediction_dir(args.baseline)[1]
    methods['stage2'] = predictions
    logits_dirs = {'stage2': args.preds}
    if args.baseline:
        logits_dirs['stage1'] = args.baseline
    render_prediction_ribbons(ground_truth, methods, _phase_names(args), out_dir,
                              video_ids=args.video, logits_dirs=logits_dirs)
    write_manifest(out_dir, 'eval ribbon', config.to_json(), config.seed, argv)


def dispatch(args, argv):
    setup_logging(args.log_level or 'INFO')
    config = load_config(args.config, args.overrides, seed=args.seed)
    setup_logging(args.log_level or config.log_level)
    command = f'{args.group} {args.command}'
    logger.info('Running %s', command)

    if command == 'data synth':
        return _data_synth(args, config, argv)
    if command == 'eval run':
        return _eval_run(args, config, argv)
    if command == 'eval ribbon':
        return _eval_ribbon(args, config, argv)

    run_root = args.out if args.group == 'pipeline' or args.group.startswith('stage') else None
    pipeline = PhaseRecognitionPipeline(config, out_root=run_root, argv=argv,
                                        progress=not args.no_progress)
    if command == 'data ingest':
        if not args.out:
            raise ConfigError('data ingest needs --out')
        pipeline.ingest(args.source, args.format, args.out)
    elif command == 'stage1 train':
        pipeline.train_stage1()
    elif command == 'stage1 lr-search':
        pipeline.stage1_lr_search()
    elif command == 'stage1 extract':
        splits = tuple(s.strip() for s in args.split.split(',') if s.strip())
        pipeline.extract(splits, batch_size=args.batch_size)
    elif command == 'stage2 train':
        pipeline.train_stage2()
    elif command == 'stage2 predict':
        pipeline.predict(args.split, out_dir=args.preds)
    elif command == 'pipeline all':
        pipeline.run_all()
    elif command == 'pipeline probe':
        pipeline.run_probe()
    else:
        raise ConfigError(f'Unknown command {command!r}')


def run_subcommand(argv):
    """Parse `argv`, run the command and return the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        dispatch(args, list(argv))
    except PhaseLabError as e:
        logger.error('%s: %s', type(e).__name__, e)
        return e.exit_code
    except Exception:
        logger.exception('Unexpected failure')
        return 1
    return 0


def main():
    sys.exit(run_subcommand(sys.argv[1:]))


if __name__ == '__main__':
    main()
