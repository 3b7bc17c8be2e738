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

__all__ = ['tensor', 'gradients', 'model', 'training', 'store', 'data', 'rng', 'attacks', 'defence',
           'evaluate', 'report']
__version__ = '1.0.0'

import logging
import os
import psutil
from typing import Optional, Tuple


class ShapeError(ValueError):
    """An op was handed inputs whose shapes it cannot combine."""
    def __init__(self, op, shapes: Tuple, detail: Optional[str]=None):
        self.op = op
        self.shapes = shapes
        msg = "Shape mismatch in %s: %s" % (op, ', '.join(str(s) for s in shapes))
        if detail is not None:
            msg += " (%s)" % detail
        super().__init__(msg)


class FormatError(ValueError):
    """A file did not parse - the offset is where we gave up."""
    def __init__(self, path: str, offset: int, detail: str):
        self.path = path
        self.offset = offset
        super().__init__("%s at offset %d: %s" % (detail, offset, path))


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
    def __init__(self, batch_index: int, terms: dict):
        self.batch_index = batch_index
        self.terms = terms
        rendered = ', '.join('%s=%r' % (k, v) for k, v in sorted(terms.items()))
        super().__init__("Non-finite loss at batch %d: %s" % (batch_index, rendered))


class Freezable:
    # An object that can be marked as frozen - after which mutating calls raise
    def __init__(self):
        self.frozen = False

    def mark_as_frozen(self):
        self.frozen = True
        return self

    def mark_as_thawed(self):
        self.frozen = False
        return self

    def ensure_mutable(self):
        # use this where the caller is about to change weights
        if self.frozen:
            raise ValueError("Cannot modify a frozen object: " + self.__repr__())


def worker_count(requested: Optional[int]=None) -> int:
    """How many worker threads to fan out to.

    :param requested: An explicit count, capped by CMTD_THREADS if that is set.
    :return: At least 1."""
    cap = os.environ.get('CMTD_THREADS')
    if requested is None:
        requested = psutil.cpu_count(logical=False) or 1
    if cap is not None:
        try:
            requested = min(requested, int(cap))
        except ValueError:
            raise ValueError("CMTD_THREADS needs to be an integer, not: " + cap)
    if requested < 1:
        logging.debug("Worker count of %d raised to 1" % requested)
    return max(1, requested)
