"""Scenario files for the simulation harness.

A scenario fixes everything a run depends on: the 64-bit seed, the party
roster, network knobs, a schedule of timestamped actions, and a list of
fault activations.  Scenarios are YAML documents; ``load_scenario`` parses
and validates one, raising ``ScenarioError`` with the offending location
(for example ``schedule[3]``) on any problem.  Identical (seed, scenario)
pairs must produce bit-identical runs, so nothing here consults wall-clock
time or process state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

__all__ = [
    "ConsortiumSpec",
    "FaultSpec",
    "NetworkSpec",
    "PartySpec",
    "Scenario",
    "ScenarioError",
    "ScheduleAction",
    "load_scenario",
    "parse_scenario",
]


class ScenarioError(ValueError):
    """A scenario document failed to parse or validate.

    ``location`` names the offending element, e.g. ``schedule[2].action``.
    """

    def __init__(self, location: str, message: str):
        self.location = location
        self.message = message
        super().__init__(f"{location}: {message}")


# Action name -> (required params, optional params).  Values are type-checked
# loosely; the engine does the semantic work.
ACTIONS: dict[str, tuple[set[str], set[str]]] = {
    "build_circuit": ({"client"}, {"length", "label", "path", "source_ip", "extra_padding"}),
    "open_flow": ({"circuit", "dest"}, {"signed"}),
    "close_circuit": ({"circuit"}, set()),
    "migrate": (set(), {"flush_after", "exit"}),
    "deanonymize": ({"lea", "dest", "exit"}, {"window", "reason", "label"}),
    "probe": ({"authority", "exit"}, {"dest", "duration_s"}),
    "expire": (set(), {"retention_days"}),
    "seal_block": (set(), set()),
    "bulk_traffic": (
        {"circuits", "flows_per_circuit"},
        {"client", "length", "label", "dest", "flush_after", "migrate", "signed"},
    ),
}

# Fault kind -> which side of the protocol it bends.
FAULT_KINDS: dict[str, str] = {
    "skip_ip_check": "relay",
    "substitute_cert": "relay",
    "forged_layer_sig": "relay",
    "wrong_chain_key": "relay",
    "leak_cert": "relay",
    "wrong_envelope": "store",
    "drop_records": "store",
    "destroy_key": "store",
    "unsigned_flow": "client",
    "reuse_hop_key": "client",
}


@dataclass(frozen=True)
class ConsortiumSpec:
    size: int = 5
    threshold: int = 3
    key_bits: int = 512


@dataclass(frozen=True)
class PartySpec:
    clients: int = 1
    entries: int = 1
    middles: int = 1
    exits: int = 1
    leas: tuple[str, ...] = ("lea-1",)
    authorities: tuple[str, ...] = ()  # probing authorities; default = leas
    databases: int = 1
    consortium: ConsortiumSpec = field(default_factory=ConsortiumSpec)

    def probe_authorities(self) -> tuple[str, ...]:
        return self.authorities or self.leas


@dataclass(frozen=True)
class NetworkSpec:
    seldom: bool = True  # one-round-trip extension on by default
    link_delay_ms: int = 1
    flush_after_circuits: int = 100
    retention_days: int = 730
    disclosure_delay_days: int = 90
    max_cert_age_s: int = 86_400
    probes_per_exit_per_day: int = 1


@dataclass(frozen=True)
class ScheduleAction:
    at_ms: int
    action: str
    params: dict
    index: int  # position in the document, for error locations


@dataclass(frozen=True)
class FaultSpec:
    party: str
    kind: str
    at_ms: int = 0
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    seed: int
    name: str = "scenario"
    parties: PartySpec = field(default_factory=PartySpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    schedule: tuple[ScheduleAction, ...] = ()
    faults: tuple[FaultSpec, ...] = ()

    def party_ids(self) -> set[str]:
        ids = {f"client-{i}" for i in range(self.parties.clients)}
        ids |= {f"entry-{i}" for i in range(self.parties.entries)}
        ids |= {f"middle-{i}" for i in range(self.parties.middles)}
        ids |= {f"exit-{i}" for i in range(self.parties.exits)}
        ids |= set(self.parties.leas)
        ids |= set(self.parties.authorities)
        return ids

    def relay_ids(self) -> set[str]:
        ids = {f"entry-{i}" for i in range(self.parties.entries)}
        ids |= {f"middle-{i}" for i in range(self.parties.middles)}
        ids |= {f"exit-{i}" for i in range(self.parties.exits)}
        return ids


def _expect(value, types, location: str, what: str):
    if not isinstance(value, types):
        names = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ScenarioError(location, f"{what} must be {names}, got {type(value).__name__}")
    return value


def _parse_consortium(raw, location: str) -> ConsortiumSpec:
    if raw is None:
        return ConsortiumSpec()
    _expect(raw, dict, location, "consortium")
    size = _expect(raw.get("size", 5), int, f"{location}.size", "size")
    threshold = _expect(raw.get("threshold", 3), int, f"{location}.threshold", "threshold")
    key_bits = _expect(raw.get("key_bits", 512), int, f"{location}.key_bits", "key_bits")
    if size < 1:
        raise ScenarioError(f"{location}.size", "consortium needs at least one member")
    if not 1 <= threshold <= size:
        raise ScenarioError(f"{location}.threshold", f"threshold must be in [1, {size}]")
    unknown = set(raw) - {"size", "threshold", "key_bits"}
    if unknown:
        raise ScenarioError(location, f"unknown consortium keys: {sorted(unknown)}")
    return ConsortiumSpec(size=size, threshold=threshold, key_bits=key_bits)


def _parse_relays(raw, location: str) -> tuple[int, int, int]:
    if raw is None:
        return 1, 1, 1
    if isinstance(raw, int):
        # Flat count: one entry, one exit, the rest in the middle pool.
        if raw < 2:
            raise ScenarioError(location, "need at least 2 relays")
        return 1, max(raw - 2, 0), 1
    _expect(raw, dict, location, "relays")
    unknown = set(raw) - {"entry", "middle", "exit"}
    if unknown:
        raise ScenarioError(location, f"unknown relay roles: {sorted(unknown)}")
    entries = _expect(raw.get("entry", 1), int, f"{location}.entry", "entry count")
    middles = _expect(raw.get("middle", 1), int, f"{location}.middle", "middle count")
    exits = _expect(raw.get("exit", 1), int, f"{location}.exit", "exit count")
    for n, role in ((entries, "entry"), (exits, "exit")):
        if n < 1:
            raise ScenarioError(f"{location}.{role}", f"need at least one {role} relay")
    if middles < 0:
        raise ScenarioError(f"{location}.middle", "middle count cannot be negative")
    return entries, middles, exits


def _parse_names(raw, default: tuple[str, ...], location: str, what: str, stem: str) -> tuple[str, ...]:
    if raw is None:
        return default
    if isinstance(raw, int):
        if raw < 0:
            raise ScenarioError(location, f"{what} count cannot be negative")
        return tuple(f"{stem}-{i + 1}" for i in range(raw))
    _expect(raw, list, location, what)
    names = []
    for i, name in enumerate(raw):
        _expect(name, str, f"{location}[{i}]", f"{what} name")
        names.append(name)
    if len(set(names)) != len(names):
        raise ScenarioError(location, f"duplicate {what} names")
    return tuple(names)


def _parse_parties(raw, location: str) -> PartySpec:
    if raw is None:
        return PartySpec()
    _expect(raw, dict, location, "parties")
    known = {"clients", "relays", "consortium", "leas", "authorities", "databases"}
    unknown = set(raw) - known
    if unknown:
        raise ScenarioError(location, f"unknown party keys: {sorted(unknown)}")
    clients = _expect(raw.get("clients", 1), int, f"{location}.clients", "clients")
    if clients < 0:
        raise ScenarioError(f"{location}.clients", "client count cannot be negative")
    entries, middles, exits = _parse_relays(raw.get("relays"), f"{location}.relays")
    leas = _parse_names(raw.get("leas"), ("lea-1",), f"{location}.leas", "leas", "lea")
    authorities = _parse_names(
        raw.get("authorities"), (), f"{location}.authorities", "authorities", "authority"
    )
    databases = _expect(raw.get("databases", 1), int, f"{location}.databases", "databases")
    if databases < 1:
        raise ScenarioError(f"{location}.databases", "need at least one database")
    consortium = _parse_consortium(raw.get("consortium"), f"{location}.consortium")
    return PartySpec(
        clients=clients,
        entries=entries,
        middles=middles,
        exits=exits,
        leas=leas,
        authorities=authorities,
        databases=databases,
        consortium=consortium,
    )


def _parse_network(raw, location: str) -> NetworkSpec:
    if raw is None:
        return NetworkSpec()
    _expect(raw, dict, location, "network")
    defaults = NetworkSpec()
    known = {
        "seldom": bool,
        "link_delay_ms": int,
        "flush_after_circuits": int,
        "retention_days": int,
        "disclosure_delay_days": int,
        "max_cert_age_s": int,
        "probes_per_exit_per_day": int,
    }
    unknown = set(raw) - set(known)
    if unknown:
        raise ScenarioError(location, f"unknown network keys: {sorted(unknown)}")
    values = {}
    for key, typ in known.items():
        got = raw.get(key, getattr(defaults, key))
        if typ is int and isinstance(got, bool):
            raise ScenarioError(f"{location}.{key}", f"{key} must be int, got bool")
        values[key] = _expect(got, typ, f"{location}.{key}", key)
    for key in ("link_delay_ms", "retention_days", "disclosure_delay_days", "max_cert_age_s"):
        if values[key] < 0:
            raise ScenarioError(f"{location}.{key}", f"{key} cannot be negative")
    if values["flush_after_circuits"] < 1:
        raise ScenarioError(f"{location}.flush_after_circuits", "flush threshold must be positive")
    return NetworkSpec(**values)


def _parse_at(raw, location: str) -> int:
    # Accept integer milliseconds, or float/int seconds via the "at_s" key.
    at = _expect(raw, int, location, "at")
    if at < 0:
        raise ScenarioError(location, "time cannot be negative")
    return at


def _parse_schedule(raw, location: str, party_ids: set[str], relay_ids: set[str]) -> tuple[ScheduleAction, ...]:
    if raw is None:
        return ()
    _expect(raw, list, location, "schedule")
    actions: list[ScheduleAction] = []
    labels: set[str] = set()
    for i, item in enumerate(raw):
        loc = f"{location}[{i}]"
        _expect(item, dict, loc, "schedule entry")
        if "action" not in item:
            raise ScenarioError(loc, "missing 'action'")
        name = _expect(item["action"], str, f"{loc}.action", "action")
        if name not in ACTIONS:
            raise ScenarioError(f"{loc}.action", f"unknown action '{name}'")
        if "at" in item and "at_s" in item:
            raise ScenarioError(loc, "give 'at' (ms) or 'at_s' (s), not both")
        if "at_s" in item:
            at_s = item["at_s"]
            if not isinstance(at_s, (int, float)) or isinstance(at_s, bool):
                raise ScenarioError(f"{loc}.at_s", "at_s must be a number")
            at_ms = int(round(at_s * 1000))
        else:
            at_ms = _parse_at(item.get("at", 0), f"{loc}.at")
        if at_ms < 0:
            raise ScenarioError(loc, "time cannot be negative")
        params = {k: v for k, v in item.items() if k not in ("action", "at", "at_s")}
        required, optional = ACTIONS[name]
        missing = required - set(params)
        if missing:
            raise ScenarioError(loc, f"action '{name}' missing params: {sorted(missing)}")
        unknown = set(params) - required - optional
        if unknown:
            raise ScenarioError(loc, f"action '{name}' has unknown params: {sorted(unknown)}")
        _check_action_refs(name, params, loc, party_ids, relay_ids, labels)
        actions.append(ScheduleAction(at_ms=at_ms, action=name, params=params, index=i))
    # Stable order: time first, document order breaks ties.
    actions.sort(key=lambda a: (a.at_ms, a.index))
    return tuple(actions)


def _check_action_refs(
    name: str,
    params: dict,
    loc: str,
    party_ids: set[str],
    relay_ids: set[str],
    labels: set[str],
) -> None:
    def need_party(key: str, pool: set[str], what: str):
        if key in params and params[key] not in pool:
            raise ScenarioError(f"{loc}.{key}", f"unknown {what} '{params[key]}'")

    need_party("client", party_ids, "client")
    need_party("exit", relay_ids, "relay")
    need_party("lea", party_ids, "lea")
    need_party("authority", party_ids, "authority")
    if name == "build_circuit":
        length = params.get("length", 3)
        if not isinstance(length, int) or length < 2:
            raise ScenarioError(f"{loc}.length", "circuit length must be an int >= 2")
        if "path" in params:
            path = params["path"]
            if not isinstance(path, list) or any(p not in relay_ids for p in path):
                raise ScenarioError(f"{loc}.path", "path must list known relays")
            if len(path) != length and "length" in params:
                raise ScenarioError(f"{loc}.path", "path length disagrees with 'length'")
        if "label" in params:
            label = params["label"]
            if not isinstance(label, str) or not label:
                raise ScenarioError(f"{loc}.label", "label must be a non-empty string")
            if label in labels:
                raise ScenarioError(f"{loc}.label", f"duplicate circuit label '{label}'")
            labels.add(label)
    if name in ("open_flow", "close_circuit"):
        circuit = params["circuit"]
        if not isinstance(circuit, str):
            raise ScenarioError(f"{loc}.circuit", "circuit must be a label string")
    if "dest" in params:
        _check_dest(params["dest"], f"{loc}.dest")
    if name == "bulk_traffic":
        for key in ("circuits", "flows_per_circuit"):
            if not isinstance(params[key], int) or params[key] < 1:
                raise ScenarioError(f"{loc}.{key}", f"{key} must be a positive int")
    if name == "deanonymize" and "window" in params:
        window = params["window"]
        ok = (
            isinstance(window, list)
            and len(window) == 2
            and all(isinstance(x, int) and not isinstance(x, bool) for x in window)
            and window[0] <= window[1]
        )
        if not ok:
            raise ScenarioError(f"{loc}.window", "window must be [start_s, end_s] with start <= end")


def _check_dest(dest, location: str) -> None:
    if not isinstance(dest, str) or ":" not in dest:
        raise ScenarioError(location, "dest must be 'ip:port'")
    ip, _, port = dest.rpartition(":")
    if not ip:
        raise ScenarioError(location, "dest must be 'ip:port'")
    try:
        port_n = int(port)
    except ValueError:
        raise ScenarioError(location, f"bad port '{port}'") from None
    if not 0 < port_n < 65536:
        raise ScenarioError(location, f"port {port_n} out of range")
    parts = ip.split(".")
    if len(parts) != 4 or any(not p.isdigit() or not 0 <= int(p) <= 255 for p in parts):
        raise ScenarioError(location, f"bad IPv4 address '{ip}'")


def _parse_faults(raw, location: str, party_ids: set[str], relay_ids: set[str]) -> tuple[FaultSpec, ...]:
    if raw is None:
        return ()
    _expect(raw, list, location, "faults")
    faults = []
    for i, item in enumerate(raw):
        loc = f"{location}[{i}]"
        _expect(item, dict, loc, "fault entry")
        for key in ("party", "kind"):
            if key not in item:
                raise ScenarioError(loc, f"missing '{key}'")
        party = _expect(item["party"], str, f"{loc}.party", "party")
        kind = _expect(item["kind"], str, f"{loc}.kind", "kind")
        if kind not in FAULT_KINDS:
            raise ScenarioError(f"{loc}.kind", f"unknown fault kind '{kind}'")
        side = FAULT_KINDS[kind]
        if side in ("relay", "store") and party not in relay_ids:
            raise ScenarioError(f"{loc}.party", f"fault '{kind}' needs a relay, got '{party}'")
        if side == "client" and party not in party_ids:
            raise ScenarioError(f"{loc}.party", f"unknown party '{party}'")
        at_ms = _parse_at(item.get("at", 0), f"{loc}.at")
        params = {k: v for k, v in item.items() if k not in ("party", "kind", "at")}
        if kind == "leak_cert":
            if "to" not in params:
                raise ScenarioError(loc, "fault 'leak_cert' needs a 'to' party")
            if params["to"] not in relay_ids:
                raise ScenarioError(f"{loc}.to", f"unknown relay '{params['to']}'")
        unknown = set(params) - ({"to"} if kind == "leak_cert" else set())
        if unknown:
            raise ScenarioError(loc, f"fault '{kind}' has unknown params: {sorted(unknown)}")
        faults.append(FaultSpec(party=party, kind=kind, at_ms=at_ms, params=params))
    return tuple(faults)


def parse_scenario(doc, source: str = "scenario") -> Scenario:
    """Validate a decoded YAML document and return a ``Scenario``."""

    if not isinstance(doc, dict):
        raise ScenarioError(source, f"document must be a mapping, got {type(doc).__name__}")
    known = {"seed", "name", "parties", "network", "schedule", "faults"}
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(source, f"unknown top-level keys: {sorted(unknown)}")
    if "seed" not in doc:
        raise ScenarioError(f"{source}.seed", "missing seed")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ScenarioError(f"{source}.seed", "seed must be an integer in [0, 2^64)")
    name = _expect(doc.get("name", "scenario"), str, f"{source}.name", "name")
    parties = _parse_parties(doc.get("parties"), f"{source}.parties")
    network = _parse_network(doc.get("network"), f"{source}.network")
    stub = Scenario(seed=seed, name=name, parties=parties, network=network)
    schedule = _parse_schedule(doc.get("schedule"), f"{source}.schedule", stub.party_ids(), stub.relay_ids())
    faults = _parse_faults(doc.get("faults"), f"{source}.faults", stub.party_ids(), stub.relay_ids())
    return Scenario(
        seed=seed,
        name=name,
        parties=parties,
        network=network,
        schedule=schedule,
        faults=faults,
    )


def load_scenario(path: str) -> Scenario:
    """Parse a scenario YAML file."""

    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(path, f"not valid YAML: {exc}") from exc
    return parse_scenario(doc, source=path)
