# Copyright (c) 2018 David Preece, All rights reserved.
#
# Permission to use, copy, modify, and/or distribute this software for any
# purpose with or without fee is hereby granted.
#
# THE SOFTWARE IS PROVIDED "AS IS" AND THE AUTHOR DISCLAIMS ALL WARRANTIES
# WITH REGARD TO THIS SOFTWARE INCLUDING ALL IMPLIED WARRANTIES OF
# MERCHANTABILITY AND FITNESS. IN NO EVENT SHALL THE AUTHOR BE LIABLE FOR
# ANY SPECIAL, DIRECT, INDIRECT, OR CONSEQUENTIAL DAMAGES OR ANY DAMAGES
# WHATSOEVER RESULTING FROM LOSS OF USE, DATA OR PROFITS, WHETHER IN AN
# ACTION OF CONTRACT, NEGLIGENCE OR OTHER TORTIOUS ACTION, ARISING OUT OF
# OR IN CONNECTION WITH THE USE OR PERFORMANCE OF THIS SOFTWARE.

import sys
import json
import logging
import os
from cmtd.cli import generic_cli, base_argparse, EXIT_OK, EXIT_RUNTIME
from cmtd.model import ModelSpec, VARIANTS, build_model, save_weights, load_weights
from cmtd.training import OptimizerConfig, train
from cmtd.data import load_directory, make_desk_subset, save_batch, load_batch
from cmtd.attacks import AttackConfig, batch_attack
from cmtd.defence import Classmap, LossWeights, build_classmap, multitask_train, classify_or_reject
from cmtd.evaluate import ExperimentConfig, run_experiment, SCENARIOS
from cmtd.report import EvalReport


def main(argv=None):
    parser = base_argparse('cmtd')
    subparsers = parser.add_subparsers(title='commands', dest='command')

    p_train = subparsers.add_parser('train', help='train a plain or defended model')
    p_train.add_argument('--spec', required=True, help='model spec json, or a preset name (desk, full_oracle...)')
    p_train.add_argument('--data', required=True, help='directory holding MNIST or CIFAR-10')
    p_train.add_argument('--out', required=True, help='weight file to write')
    p_train.add_argument('--variant', choices=VARIANTS, help='override the spec variant')
    p_train.add_argument('--epochs', type=int, default=1)
    p_train.add_argument('--seed', type=int, default=0)
    p_train.add_argument('--n-per-class', type=int, help='train on a class balanced desk subset')
    p_train.add_argument('--learning-rate', type=float, default=1e-3)
    p_train.add_argument('--batch-size', type=int, default=64)
    p_train.add_argument('--classmap', help='classmap json (defended variants)')
    p_train.add_argument('--loss-weights', default='0.4,0.4,0.2', help='alpha,beta,gamma', metavar='A,B,G')
    p_train.add_argument('--epsilon-reg', type=float, default=0.1, help='in-step fgsm budget')
    p_train.add_argument('--recompute-classmap', metavar='JSON',
                         help='after training, estimate a classmap on the defended model and write it here')

    p_classmap = subparsers.add_parser('build-classmap', help='estimate a classmap with fgsm')
    p_classmap.add_argument('--model', required=True)
    p_classmap.add_argument('--data', required=True)
    p_classmap.add_argument('--epsilon', type=float, default=0.1)
    p_classmap.add_argument('--out', required=True)
    p_classmap.add_argument('--split', default='train', choices=('train', 'test'))
    p_classmap.add_argument('--n-per-class', type=int)
    p_classmap.add_argument('--seed', type=int, default=0)

    p_attack = subparsers.add_parser('attack', help='attack a dataset, write an adversarial batch')
    p_attack.add_argument('--model', required=True)
    p_attack.add_argument('--config', required=True, help='attack config json')
    p_attack.add_argument('--data', required=True)
    p_attack.add_argument('--out', required=True)
    p_attack.add_argument('--split', default='test', choices=('train', 'test'))
    p_attack.add_argument('--n', type=int, default=1000, help='attack the first n examples')
    p_attack.add_argument('--classmap', help='label pairs for cw_l2_combined')
    p_attack.add_argument('--seed', type=int, default=0)

    p_detect = subparsers.add_parser('detect', help='run the pair detector over an adversarial batch')
    p_detect.add_argument('--model', required=True)
    p_detect.add_argument('--classmap', required=True)
    p_detect.add_argument('--batch', required=True)
    p_detect.add_argument('--report', required=True)
    p_detect.add_argument('--all', action='store_true', help='include unsuccessful perturbations')

    p_evaluate = subparsers.add_parser('evaluate', help='run an experiment scenario')
    p_evaluate.add_argument('--scenario', choices=SCENARIOS)
    p_evaluate.add_argument('--config', required=True, help='experiment config json')
    p_evaluate.add_argument('--out', help='report json (overrides the config)')

    return generic_cli(parser, {'train': train_model, 'build-classmap': classmap_cmd, 'attack': attack_cmd,
                                'detect': detect_cmd, 'evaluate': evaluate_cmd}, argv)


def train_model(args):
    if os.path.exists(args.spec):
        spec = ModelSpec.load(args.spec)
    else:
        spec = ModelSpec.preset(args.spec)
    if args.variant is not None:
        spec = spec.with_variant(args.variant)
    dataset = load_directory(args.data, 'train')
    if args.n_per_class is not None:
        dataset = make_desk_subset(dataset, args.n_per_class, args.seed)
    spec.input_shape = tuple(dataset.input_shape)
    spec.validate()
    config = OptimizerConfig(learning_rate=args.learning_rate, batch_size=args.batch_size).validate()
    model = build_model(spec, args.seed)

    if spec.defended:
        if args.classmap is None:
            raise ValueError("A defended model needs --classmap (see build-classmap)")
        weights = LossWeights(*(float(w) for w in args.loss_weights.split(','))).validate()
        multitask_train(model, dataset, Classmap.load(args.classmap), weights, args.epsilon_reg, args.epochs,
                        args.seed, config=config)
    else:
        train(model, dataset, args.epochs, config=config, seed=args.seed)
    save_weights(model, args.out)

    if args.recompute_classmap is not None:
        if not spec.defended:
            raise ValueError("--recompute-classmap only applies to defended models")
        build_classmap(model.mark_as_frozen(), dataset, seed=args.seed).save(args.recompute_classmap)


def classmap_cmd(args):
    model = load_weights(args.model).mark_as_frozen()
    dataset = load_directory(args.data, args.split)
    if args.n_per_class is not None:
        dataset = make_desk_subset(dataset, args.n_per_class, args.seed)
    classmap = build_classmap(model, dataset, epsilon=args.epsilon, seed=args.seed)
    classmap.save(args.out)
    print(repr(classmap))


def attack_cmd(args):
    model = load_weights(args.model).mark_as_frozen()
    with open(args.config) as f:
        config = AttackConfig.from_dict(json.load(f))
    dataset = load_directory(args.data, args.split).head(args.n)
    pairs = Classmap.load(args.classmap).pairs if args.classmap is not None else None
    batch = batch_attack(model, dataset, config, args.seed, pairs=pairs)
    save_batch(batch, args.out)
    print(repr(batch))


def detect_cmd(args):
    model = load_weights(args.model).mark_as_frozen()
    classmap = Classmap.load(args.classmap)
    batch = load_batch(args.batch)
    chosen = batch if args.all else batch.successful()
    classified = classify_or_reject(model, classmap, chosen.perturbed)
    report = EvalReport('detect', {'model': args.model, 'classmap': args.classmap, 'batch': args.batch,
                                   'attack': batch.attack, 'all': args.all})
    report.add_cell(examples=len(chosen), rejected=classified.rejected, accepted=classified.accepted,
                    rejection_rate=classified.rejection_rate)
    report.add_records([{'label': int(chosen.labels[i]), 'accepted': v.accepted, 'predicted': v.predicted,
                         'auxiliary': v.auxiliary} for i, v in enumerate(classified.verdicts)])
    report.finish().write(args.report)
    print("Rejected %d of %d" % (classified.rejected, len(chosen)))


def evaluate_cmd(args):
    config = ExperimentConfig.load(args.config, scenario=args.scenario, out=args.out)
    if config.out is None:
        raise ValueError("No report path - pass --out or set 'out' in the config")
    report = run_experiment(config)
    if report.failed:
        logging.error("%d stage(s) failed, see the errors section of %s" % (len(report.errors), config.out))
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
