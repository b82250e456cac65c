"""Transaction log parsing, global price reconstruction and wallet inference."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

from .lending import ZERO, PriceOracle, to_decimal

logger = logging.getLogger(__name__)

EVENT_TYPES = ("deposit", "borrow", "repay", "withdraw", "liquidation")
USER_ACTIONS = ("deposit", "borrow", "repay", "withdraw")

CSV_COLUMNS = (
    "timestamp", "user_id", "event_type", "asset", "amount", "amount_usd",
    "price_usd", "liq_debt_repaid_usd", "liq_collateral_seized_usd",
)

USD_MISMATCH_TOLERANCE = 1e-3


class IngestError(Exception):
    pass


@dataclass(frozen=True)
class TxRecord:
    """One historical transaction.

    For liquidation rows ``asset``/``amount`` describe the seized collateral
    and the two ``liq_*`` fields carry the USD legs of the liquidation.
    """

    timestamp: int
    user_id: str
    event_type: str
    asset: str
    amount: Decimal
    amount_usd: float
    price_usd: float
    liq_debt_repaid_usd: float | None = None
    liq_collateral_seized_usd: float | None = None
    line: int = field(default=0, compare=False)

    def to_row(self) -> list[str]:
        def opt(v):
            return "" if v is None else repr(v)
        return [str(self.timestamp), self.user_id, self.event_type, self.asset,
                str(self.amount), repr(self.amount_usd), repr(self.price_usd),
                opt(self.liq_debt_repaid_usd), opt(self.liq_collateral_seized_usd)]


@dataclass
class ParseReport:
    rows: int = 0
    errors: list[dict] = field(default_factory=list)
    warnings: int = 0
    conflicts: int = 0
    out_of_order: int = 0
    usd_mismatches: int = 0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EventLog:
    """Time-ordered transactions with a per-user index (ties keep input order)."""

    records: tuple[TxRecord, ...]
    report: ParseReport | None = field(default=None, compare=False)

    def __post_init__(self):
        by_user: dict[str, list[TxRecord]] = defaultdict(list)
        for r in self.records:
            by_user[r.user_id].append(r)
        object.__setattr__(self, "_by_user", {u: tuple(v) for u, v in by_user.items()})

    @classmethod
    def from_records(cls, records: Iterable[TxRecord],
                     report: ParseReport | None = None) -> EventLog:
        return cls(tuple(sorted(records, key=lambda r: r.timestamp)), report)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def users(self) -> list[str]:
        return sorted(self._by_user)

    def for_user(self, user_id: str) -> tuple[TxRecord, ...]:
        return self._by_user.get(user_id, ())

    @property
    def start_time(self) -> int:
        return self.records[0].timestamp

    @property
    def end_time(self) -> int:
        return self.records[-1].timestamp

    def until(self, t: int) -> EventLog:
        """Records with timestamp <= t."""
        return EventLog(tuple(r for r in self.records if r.timestamp <= t), self.report)


def _parse_row(row: dict, line: int) -> TxRecord:
    event_type = (row.get("event_type") or "").strip()
    if event_type not in EVENT_TYPES:
        raise IngestError(f"unknown event type {event_type!r}")
    try:
        timestamp = int(row["timestamp"])
        amount = Decimal(row["amount"].strip())
        amount_usd = float(row["amount_usd"])
        price_usd = float(row["price_usd"])
    except (ValueError, InvalidOperation, AttributeError, TypeError) as exc:
        raise IngestError(f"malformed row: {exc}") from None
    if not amount.is_finite() or amount < 0:
        raise IngestError("negative amount" if amount < 0 else "non-finite amount")
    if not amount_usd >= 0:
        raise IngestError("negative amount_usd")
    if not price_usd > 0 or price_usd == float("inf"):
        raise IngestError("price_usd must be positive")
    user_id = (row.get("user_id") or "").strip()
    asset = (row.get("asset") or "").strip()
    if not user_id or not asset:
        raise IngestError("missing user_id or asset")

    def optional(name):
        raw = (row.get(name) or "").strip()
        if not raw:
            return None
        try:
            value = float(raw)
        except ValueError:
            raise IngestError(f"malformed {name}") from None
        if not value >= 0:
            raise IngestError(f"negative {name}")
        return value

    debt_usd = optional("liq_debt_repaid_usd")
    seized_usd = optional("liq_collateral_seized_usd")
    if event_type == "liquidation" and (debt_usd is None or seized_usd is None):
        raise IngestError("liquidation row without liq_debt_repaid_usd/liq_collateral_seized_usd")
    return TxRecord(timestamp, user_id, event_type, asset, amount, amount_usd, price_usd,
                    debt_usd, seized_usd, line)


def parse_transactions(path: str | Path) -> EventLog:
    """Parse and validate a transaction CSV.

    Bad rows are dropped and listed in ``log.report.errors`` with their line
    number; the returned log is sorted by timestamp (stable for ties).
    """
    report = ParseReport()
    records: list[TxRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"missing columns: {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                report.errors.append({"line": line, "reason": "malformed row: wrong field count"})
                continue
            try:
                rec = _parse_row(row, line)
            except IngestError as exc:
                report.errors.append({"line": line, "reason": str(exc)})
                continue
            expected = float(rec.amount) * rec.price_usd
            if abs(rec.amount_usd - expected) > USD_MISMATCH_TOLERANCE * max(abs(expected), 1e-12) \
                    and not (expected == 0 and rec.amount_usd == 0):
                report.usd_mismatches += 1
            records.append(rec)
    report.rows = len(records)
    last = None
    for r in records:
        if last is not None and r.timestamp < last:
            report.out_of_order += 1
        last = r.timestamp if last is None else max(last, r.timestamp)
    report.warnings = report.out_of_order + report.usd_mismatches
    if report.out_of_order:
        logger.warning("%d out-of-order rows in %s were sorted", report.out_of_order, path)
    return EventLog.from_records(records, report)


def write_transactions(records: Iterable[TxRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.to_row())


def build_price_history(log: EventLog | Iterable[TxRecord]) -> PriceOracle:
    """Union of every user's price observations, deduplicated per timestamp.

    Conflicting prices at one timestamp resolve to the last observation when
    users are visited in sorted ``user_id`` order (each user's rows in their
    own order), which makes the result independent of how users are
    interleaved in the input.
    """
    records = log.records if isinstance(log, EventLog) else tuple(log)
    by_user: dict[str, list[TxRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    series: dict[str, dict[int, float]] = defaultdict(dict)
    conflicts = 0
    for user in sorted(by_user):
        for r in by_user[user]:
            seen = series[r.asset]
            prev = seen.get(r.timestamp)
            if prev is not None and prev != r.price_usd:
                conflicts += 1
            seen[r.timestamp] = r.price_usd
    for asset in [a for a, s in series.items() if not s]:
        logger.warning("asset %s has no price observations; excluded", asset)
    oracle = PriceOracle.from_series(
        {a: sorted(s.items()) for a, s in series.items() if s}, conflicts=conflicts)
    if isinstance(log, EventLog) and log.report is not None:
        log.report.conflicts = conflicts
    return oracle


def save_price_history(oracle: PriceOracle, path: str | Path) -> None:
    data = {"conflicts": oracle.conflicts,
            "series": {a: [[t, p] for t, p in oracle.series(a)] for a in oracle.assets}}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def load_price_history(path: str | Path) -> PriceOracle:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return PriceOracle.from_series(
        {a: [(int(t), float(p)) for t, p in obs] for a, obs in data["series"].items()},
        conflicts=data.get("conflicts", 0))


_WALLET_SIGN = {"deposit": -1, "repay": -1, "withdraw": 1, "borrow": 1}


def infer_wallet_balances(user_events: Sequence[TxRecord],
                          safety_factor: float = 1.5) -> dict[str, Decimal]:
    """Smallest initial wallet that keeps every deposit/repay funded, times a safety factor.

    Liquidations are ignored: the liquidator repays the debt.
    """
    if safety_factor < 1:
        raise ValueError("safety_factor must be >= 1")
    factor = to_decimal(float(safety_factor))
    running: dict[str, Decimal] = defaultdict(lambda: ZERO)
    lowest: dict[str, Decimal] = {}
    for ev in user_events:
        sign = _WALLET_SIGN.get(ev.event_type)
        if sign is None:
            continue
        running[ev.asset] += sign * ev.amount
        lowest[ev.asset] = min(lowest.get(ev.asset, ZERO), running[ev.asset])
    return {a: max(ZERO, -low) * factor for a, low in sorted(lowest.items())}


def wallet_trace(user_events: Sequence[TxRecord], initial: dict[str, Decimal]
                 ) -> list[dict[str, Decimal]]:
    """Wallet balances after each user action, starting from ``initial``."""
    wallet = defaultdict(lambda: ZERO, initial)
    out = []
    for ev in user_events:
        sign = _WALLET_SIGN.get(ev.event_type)
        if sign is None:
            continue
        wallet[ev.asset] += sign * ev.amount
        out.append(dict(wallet))
    return out
