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

import csv
import io
import json
import logging
import time
import cbor
import shortuuid
from typing import List, Dict
from . import __version__
from .store import atomic_write


class EvalReport:
    """Results of one experiment run: aggregate cells, sweeps for plotting, and the raw per-example records.

    :param scenario: Which experiment.
    :param config: The config as a dict - echoed into the report and hashed into the run id."""

    def __init__(self, scenario: str, config: dict):
        self.scenario = scenario
        self.config = config
        self.run_id = run_id(config)
        self.cells = []
        self.sweeps = {}
        self.matrices = {}
        self.records = []
        self.errors = []
        self.started = time.time()
        self.seconds = None

    def add_cell(self, **values):
        """One row of the result table. Rates are checked to lie in [0, 1]."""
        for name, value in values.items():
            if name.endswith('rate') or name in ('precision', 'recall') or name.endswith('accuracy'):
                if value is not None and not 0.0 <= value <= 1.0:
                    raise ValueError("Rate %s out of range: %r" % (name, value))
        self.cells.append(values)

    def add_sweep_row(self, sweep: str, **values):
        self.sweeps.setdefault(sweep, []).append(values)

    def add_matrix(self, name: str, matrix):
        self.matrices[name] = [[float(v) for v in row] for row in matrix]

    def add_records(self, records: List[dict]):
        self.records.extend(records)

    def add_error(self, stage: str, error: BaseException):
        logging.error("Stage %s failed: %s" % (stage, str(error)))
        self.errors.append({'stage': stage, 'type': type(error).__name__, 'message': str(error)})

    @property
    def failed(self) -> bool:
        return len(self.errors) != 0

    def finish(self) -> 'EvalReport':
        self.seconds = time.time() - self.started
        return self

    def to_dict(self) -> dict:
        return {'scenario': self.scenario,
                'run_id': self.run_id,
                'version': __version__,
                'config': self.config,
                'cells': self.cells,
                'sweeps': self.sweeps,
                'matrices': self.matrices,
                'record_count': len(self.records),
                'errors': self.errors,
                'timing': {'started': time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(self.started)),
                           'seconds': self.seconds}}

    def write(self, path: str) -> List[str]:
        """Write the JSON report atomically, a CSV per sweep and per matrix, and a CBOR file of the records.

        :return: Every path written, report first."""
        stem = path[:-5] if path.endswith('.json') else path
        written = [path]
        atomic_write(path, (json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n').encode())
        for name, rows in sorted(self.sweeps.items()):
            csv_path = '%s.%s.csv' % (stem, name)
            atomic_write(csv_path, _csv(rows).encode())
            written.append(csv_path)
        for name, matrix in sorted(self.matrices.items()):
            csv_path = '%s.%s.csv' % (stem, name)
            atomic_write(csv_path, _csv([{'row': i, **{str(j): v for j, v in enumerate(r)}}
                                         for i, r in enumerate(matrix)]).encode())
            written.append(csv_path)
        records_path = stem + '.records.cbor'
        atomic_write(records_path, cbor.dumps({'run_id': self.run_id, 'scenario': self.scenario,
                                               'records': self.records}))
        written.append(records_path)
        logging.info("Wrote report: %s (+%d sidecars)" % (path, len(written) - 1))
        return written

    def __repr__(self):
        return "<EvalReport %s cells=%d records=%d errors=%d>" % \
               (self.scenario, len(self.cells), len(self.records), len(self.errors))


def run_id(config: dict) -> str:
    """Deterministic: the same config always gets the same id."""
    return shortuuid.uuid(name=json.dumps(config, sort_keys=True))


def load_records(path: str) -> List[dict]:
    """The per-example records from a report's CBOR sidecar."""
    with open(path, 'rb') as f:
        return cbor.loads(f.read())['records']


def report_paths(path: str) -> Dict[str, str]:
    stem = path[:-5] if path.endswith('.json') else path
    return {'report': path, 'records': stem + '.records.cbor', 'stem': stem}


def _csv(rows: List[dict]) -> str:
    if len(rows) == 0:
        return ''
    columns = []
    for row in rows:
        columns.extend(c for c in row if c not in columns)
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=columns, lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ('' if v is None else v) for k, v in row.items()})
    return out.getvalue()
