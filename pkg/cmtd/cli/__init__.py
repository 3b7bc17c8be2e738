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
import logging
from argparse import ArgumentParser
from typing import Optional, List

EXIT_OK = 0
EXIT_INTERRUPTED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def base_argparse(progname) -> ArgumentParser:
    """Create an argparser with -v and -q flags.

    :return: An argparser"""
    parser = ArgumentParser(prog=progname)
    logging_group = parser.add_argument_group('logging options')
    logging_group.add_argument('-v', '--verbose', help='verbose logging', action='store_true')
    logging_group.add_argument('-q', '--quiet', help='no logging', action='store_true')
    return parser


def configure_logging(verbose: bool, quiet: bool):
    if verbose and quiet:
        raise ValueError("Can't select both quiet and verbose logging")
    if not quiet:
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                            format='%(asctime)s.%(msecs)03d %(levelname)-8s %(message)s',
                            datefmt='%m%d%H%M%S')


def generic_cli(parser: ArgumentParser, implementations, argv: Optional[List[str]]=None) -> int:
    """Call to implement a cli. See cmtd.cli.cmtd.

    :param parser: an ArgumentParser from base_argparse.
    :param implementations: A map of verb->implementation for the various commands.
    :param argv: Arguments, defaults to sys.argv.
    :return: The exit status - 0, 1 for an interrupt, 2 for bad configuration or files, 3 for a failed run."""
    args = parser.parse_args(argv)

    if 'command' not in args:
        args.command = None

    if args.command is None and None not in implementations:
        parser.print_help()
        return EXIT_CONFIG

    # go
    try:
        configure_logging(args.verbose, args.quiet)
        status = implementations[args.command](args)
        return EXIT_OK if status is None else status
    except (ValueError, OSError) as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as e:
        print(str(e), file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED
