"""Plain-text exports of a run: time series, histograms, Sankey flows, manifest.

Floats are written with ``repr`` (shortest round-tripping form), so parsing an
exported file gives back the exact in-memory values.  Nothing written here
contains a timestamp except ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from pathlib import Path

from .margins import NORMS, SUBGROUPS, EpochStats, GroupStats

SCHEMAS = {
    "timeseries": "margintrack.timeseries/1",
    "histogram": "margintrack.histogram/1",
    "sankey": "margintrack.sankey/1",
    "margins": "margintrack.margins/1",
    "manifest": "margintrack.manifest/1",
}
SPLITS = ("train", "test")
_NORM_KEY = {"l2": "d2", "linf": "dinf"}


class EmptyLog(ValueError):
    pass


class InsufficientEpochs(ValueError):
    pass


def _num(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[_num(v) for v in row] for row in rows])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# time series


def timeseries_columns():
    cols = ["epoch", "train_error", "test_error"]
    for split in SPLITS:
        for sub in SUBGROUPS:
            for norm in NORMS:
                cols += [f"{split}_{sub}_{_NORM_KEY[norm]}_avg", f"{split}_{sub}_{_NORM_KEY[norm]}_se"]
    for split in SPLITS:
        cols += [f"{split}_{sub}_count" for sub in SUBGROUPS] + [f"{split}_excluded"]
    return cols


def _timeseries_row(entry):
    row = [entry.epoch, entry.train_error, entry.test_error]
    for split in SPLITS:
        for sub in SUBGROUPS:
            g = entry.stats[split].group(sub)
            for norm in NORMS:
                row += [g.get(norm, "avg"), g.get(norm, "se")]
    for split in SPLITS:
        st = entry.stats[split]
        row += [st.group(sub).count for sub in SUBGROUPS] + [st.excluded]
    return row


def export_timeseries(log) -> str:
    if not log.entries:
        raise EmptyLog("run log has no epochs")
    return _write_csv(timeseries_columns(), [_timeseries_row(e) for e in log.entries])


def parse_timeseries(text):
    """Rows of an exported time series as ``{epoch, train_error, test_error, stats}``."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != timeseries_columns():
        raise ValueError("unexpected time-series header")
    opt = lambda s: float(s) if s != "" else None  # noqa: E731
    out = []
    for r in reader:
        stats = {}
        for split in SPLITS:
            groups = []
            for sub in SUBGROUPS:
                p = f"{split}_{sub}_"
                groups.append(GroupStats(int(r[p + "count"]), opt(r[p + "d2_avg"]), opt(r[p + "d2_se"]),
                                         opt(r[p + "dinf_avg"]), opt(r[p + "dinf_se"])))
            stats[split] = EpochStats(*groups, int(r[f"{split}_excluded"]))
        out.append({"epoch": int(r["epoch"]), "train_error": float(r["train_error"]),
                    "test_error": float(r["test_error"]), "stats": stats})
    return out


# ---------------------------------------------------------------------------
# histograms


def histogram_csv(hists) -> str:
    """``hists`` maps subgroup -> MarginHistogram, all sharing one set of edges."""
    c, i = hists["correct"], hists["incorrect"]
    rows = [(float(lo), float(hi), int(a), int(b))
            for lo, hi, a, b in zip(c.edges[:-1], c.edges[1:], c.counts, i.counts)]
    return _write_csv(["bin_lo", "bin_hi", "count_correct", "count_incorrect"], rows)


def histogram_name(split, epoch, norm):
    return f"histograms/{split}_epoch{epoch:03d}_{norm}.csv"


def export_histograms(log) -> dict:
    """``{relative path: csv text}``, one file per (split, epoch, norm) that has records."""
    out = {}
    for e in log.entries:
        for (split, norm), hists in sorted(e.histograms.items()):
            out[histogram_name(split, e.epoch, norm)] = histogram_csv(hists)
    if not out:
        raise EmptyLog("run log holds no histograms")
    return out


# ---------------------------------------------------------------------------
# sankey


def export_sankey(ledger) -> str:
    if len(ledger.epochs) < 2:
        raise InsufficientEpochs("a Sankey diagram needs at least two epochs")
    nodes = []
    for e, bm in zip(ledger.epochs, ledger.bitmaps):
        n_ok = int(bm.sum())
        nodes += [{"id": f"correct@{e}", "epoch": e, "state": "correct", "count": n_ok},
                  {"id": f"incorrect@{e}", "epoch": e, "state": "incorrect", "count": int(bm.size - n_ok)}]
    links = []
    for f in ledger.flows:
        for (a, b), v in (
                (("correct", "correct"), f.correct_to_correct),
                (("correct", "incorrect"), f.correct_to_incorrect),
                (("incorrect", "correct"), f.incorrect_to_correct),
                (("incorrect", "incorrect"), f.incorrect_to_incorrect)):
            if v:
                links.append({"source": f"{a}@{f.from_epoch}", "target": f"{b}@{f.to_epoch}", "value": v})
    doc = {"schema": SCHEMAS["sankey"], "population": ledger.size, "nodes": nodes, "links": links}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# per-image margins


MARGIN_COLUMNS = ["epoch", "image_id", "d2", "dinf", "predicted_class", "true_label", "correct",
                  "retries_l2", "retries_linf"]


def export_margins(log, split) -> str:
    rows = [(r.epoch, r.image_id, r.d2, r.dinf, r.predicted_class, r.true_label, r.correct,
             r.retries_l2, r.retries_linf)
            for e in log.entries for r in e.records[split]]
    return _write_csv(MARGIN_COLUMNS, rows)


# ---------------------------------------------------------------------------
# run directory


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_id(config_dict, checksums) -> str:
    """40-hex id over the canonical config and the dataset bytes."""
    return hashlib.sha1(canonical_json({"config": config_dict, "data": checksums}).encode()).hexdigest()


class RunWriter:
    """Rewrites the run directory after every epoch so an aborted run keeps what it finished."""

    def __init__(self, out_dir, config_dict, checksums):
        self.out = Path(out_dir)
        self.config = config_dict
        self.checksums = dict(checksums)
        self.id = run_id(config_dict, checksums)
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.files = set()
        self.out.mkdir(parents=True, exist_ok=True)

    def _put(self, rel, text):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text, newline="")
        tmp.replace(p)
        self.files.add(rel)

    def on_epoch(self, entry, log):
        self._put("timeseries.csv", export_timeseries(log))
        for (split, norm), hists in sorted(entry.histograms.items()):
            self._put(histogram_name(split, entry.epoch, norm), histogram_csv(hists))
        for split in SPLITS:
            self._put(f"margins_{split}.csv", export_margins(log, split))
        if len(log.ledger.epochs) >= 2:
            self._put("sankey.json", export_sankey(log.ledger))

    def finish(self, status, log=None, error=None):
        manifest = {
            "schema": SCHEMAS["manifest"],
            "schemas": SCHEMAS,
            "run_id": self.id,
            "status": status,
            "error": error,
            "config": self.config,
            "seeds": log.seeds if log is not None else None,
            "epochs_completed": len(log.entries) if log is not None else 0,
            "dataset_checksums": self.checksums,
            "outputs": sorted(f for f in self.files if (self.out / f).is_file()),
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return manifest
