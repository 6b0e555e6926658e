"""KG construction from SMD-style KB tables (schedule, navigation, weather)."""

import json
import logging
import re
from typing import Dict, List, Sequence, Tuple

from pydantic import ValidationError

from models.dialogue import SmdDomain, SmdTableRecord
from services import storage
from services.errors import DataError
from services.kg_store import StringTriple, normalize_name

logger = logging.getLogger(__name__)

MISSING_VALUES = {"", "-"}

# attribute -> (forward relation, inverse relation).
# Schedule dates get their own names so a date entity shared with a weather
# report (e.g. "monday") does not walk back to forecasts through IsDateOf. The
# cost is one extra relation pair and no shared "date" relation for the heads
# to learn across domains.
SCHEDULE_RELATIONS: Dict[str, Tuple[str, str]] = {
    "time": ("HasTime", "IsTimeOf"),
    "date": ("HasEventDate", "IsEventDateOf"),
    "party": ("HasParty", "IsPartyOf"),
    "room": ("HasRoom", "IsRoomOf"),
    "agenda": ("HasAgenda", "IsAgendaOf"),
}

NAVIGATION_RELATIONS: Dict[str, Tuple[str, str]] = {
    "address": ("HasAddress", "IsAddressOf"),
    "poi_type": ("HasType", "IsTypeOf"),
    "traffic_info": ("HasTraffic", "IsTrafficOf"),
    "distance": ("HasDistance", "IsDistanceFrom"),
}
NAVIGATION_ALIASES = {"type": "poi_type", "traffic": "traffic_info"}

WEATHER_RELATIONS: Dict[str, Tuple[str, str]] = {
    "location": ("HasLocation", "IsLocationOf"),
    "date": ("HasDate", "IsDateOf"),
    "weather": ("HasWeather", "IsWeatherOf"),
    "low": ("HasLowTemp", "IsLowTempOf"),
    "high": ("HasHighTemp", "IsHighTempOf"),
}
WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
TODAY_RELATION = "IsEqualTo"

ITEM_KEY = {SmdDomain.SCHEDULE: "event", SmdDomain.NAVIGATION: "poi", SmdDomain.WEATHER: "location"}

_REPORT_RE = re.compile(r"^\s*(?P<weather>[^,]+?)\s*,\s*low of\s+(?P<low>[^,]+?)\s*,\s*high of\s+(?P<high>[^,]+?)\s*$",
                        re.IGNORECASE)


def relation_inventory() -> List[str]:
    names: List[str] = []
    for table in (SCHEDULE_RELATIONS, NAVIGATION_RELATIONS, WEATHER_RELATIONS):
        for forward, inverse in table.values():
            names.extend([forward, inverse])
    names.append(TODAY_RELATION)
    return names


def _present(value: str) -> bool:
    return value is not None and value.strip() not in MISSING_VALUES


def _item_name(record: SmdTableRecord, index: int) -> str:
    key = ITEM_KEY[record.domain]
    name = record.attributes.get(key, "")
    if not _present(name):
        raise DataError(f"{record.domain.value} record {index} has no '{key}' attribute")
    return name.strip()


def _attribute_triples(item: str, attributes: Dict[str, str], relations: Dict[str, Tuple[str, str]],
                       aliases: Dict[str, str], skip: str, index: int, domain: str) -> List[StringTriple]:
    triples: List[StringTriple] = []
    for raw_key, value in attributes.items():
        key = aliases.get(raw_key.lower(), raw_key.lower())
        if key == skip:
            continue
        if key not in relations:
            raise DataError(f"{domain} record {index}: unknown attribute '{raw_key}'")
        if not _present(value):
            continue
        forward, inverse = relations[key]
        triples.append((item, forward, value.strip()))
        triples.append((value.strip(), inverse, item))
    return triples


def parse_weather_report(report: str) -> Tuple[str, str, str]:
    """'snow, low of 20f, high of 30f' -> ('snow', '20f', '30f')."""
    match = _REPORT_RE.match(report)
    if not match:
        raise DataError(f"Unparseable weather report: {report!r}")
    return match.group("weather"), match.group("low"), match.group("high")


def _weather_reports(records: Sequence[Tuple[int, SmdTableRecord]]) -> List[Tuple[str, str, str]]:
    """(location, weekday, report) sorted by location then weekday order."""
    reports = []
    for index, record in records:
        location = _item_name(record, index)
        for raw_key, value in record.attributes.items():
            key = raw_key.lower()
            if key in ("location", "today"):
                continue
            if key not in WEEKDAYS:
                raise DataError(f"weather record {index}: unknown attribute '{raw_key}'")
            if _present(value):
                reports.append((location, key, value))
    reports.sort(key=lambda r: (normalize_name(r[0]), WEEKDAYS.index(r[1]), r[2]))
    return reports


def build_smd_kg(records: Sequence[SmdTableRecord]) -> List[StringTriple]:
    """Schedule/navigation items map attributes to relations; weather days become ReportID entities."""
    triples: List[StringTriple] = []
    weather: List[Tuple[int, SmdTableRecord]] = []

    for index, record in enumerate(records):
        if record.domain == SmdDomain.SCHEDULE:
            triples.extend(_attribute_triples(_item_name(record, index), record.attributes, SCHEDULE_RELATIONS,
                                              {}, "event", index, "schedule"))
        elif record.domain == SmdDomain.NAVIGATION:
            triples.extend(_attribute_triples(_item_name(record, index), record.attributes, NAVIGATION_RELATIONS,
                                              NAVIGATION_ALIASES, "poi", index, "navigation"))
        else:
            weather.append((index, record))
            today = record.attributes.get("today")
            if _present(today):
                if today.strip().lower() not in WEEKDAYS:
                    raise DataError(f"weather record {index}: 'today' is not a weekday: {today!r}")
                triples.append(("today", TODAY_RELATION, today.strip()))

    for report_id, (location, weekday, report) in enumerate(_weather_reports(weather)):
        entity = f"ReportID{report_id}"
        condition, low, high = parse_weather_report(report)
        values = {"location": location, "date": weekday, "weather": condition, "low": low, "high": high}
        for key, value in values.items():
            forward, inverse = WEATHER_RELATIONS[key]
            triples.append((entity, forward, value))
            triples.append((value, inverse, entity))

    logger.info(f"🗺️ Built {len(triples)} SMD triples from {len(records)} table records")
    return triples


def load_tables(path) -> List[SmdTableRecord]:
    records: List[SmdTableRecord] = []
    for line_no, line in storage.read_lines(path):
        try:
            records.append(SmdTableRecord.model_validate(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as e:
            raise DataError(f"{path}:{line_no}: invalid table record ({e})") from None
    if not records:
        raise DataError(f"No table records in {path}")
    return records
