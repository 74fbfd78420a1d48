"""
OVK command line tool

Usage:
    python scripts/ovk_cli.py device create --store a.json --manufacturer mfr.json --model OVK-Key-1
    python scripts/ovk_cli.py device negotiate --store a.json --party-id 0 --parties 3 --password X --channel dir:/tmp/q
    python scripts/ovk_cli.py device register --store a.json --service http://127.0.0.1:8000 --username alice
    python scripts/ovk_cli.py device login --store b.json --service http://127.0.0.1:8000 --username alice
    python scripts/ovk_cli.py service policy --manufacturer mfr.json --model OVK-Key-1 --out policy.json
    python scripts/ovk_cli.py service serve --config svc.json
    python scripts/ovk_cli.py scenario run scenarios/usecase_paper.json
    python scripts/ovk_cli.py race run --n 3 --n-u 2 --n-a 1 --attacker-first
    python scripts/ovk_cli.py race table

Exit codes: 0 success, 1 protocol error or failed expectation, 2 usage error
"""
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import argparse
import json

from pydantic import ValidationError

from config import settings
from src.attestation.manufacturer import Manufacturer, TrustPolicy, save_policy
from src.authenticator.device import Authenticator
from src.authenticator.device_store import DeviceStore
from src.errors import OvkError
from src.harness.race import RaceConfig, race_oracle, race_table, run_race
from src.harness.scenario import run_scenario
from src.seed.channels import DirectoryChannel
from src.seed.exchange import NegotiationConfig, SeedRecord
from src.wire.client import ServiceClient
from src.wire.transport import HttpTransport


def _load_manufacturer(path: str, name: str) -> Manufacturer:
    if Path(path).exists():
        return Manufacturer.load(path)
    maker = Manufacturer(name)
    maker.save(path)
    print(f"🏭 Created manufacturer {name} at {path}")
    return maker


def _open_device(args) -> Authenticator:
    device = DeviceStore(args.store).load()
    device.unlock(True)
    return device


def _client(args) -> ServiceClient:
    return ServiceClient(HttpTransport(args.service))


# ============================================================================
# DEVICE COMMANDS
# ============================================================================

def cmd_device_create(args):
    maker = _load_manufacturer(args.manufacturer, args.manufacturer_id)
    device = Authenticator(maker.issue_device(args.model), name=args.name or Path(args.store).stem)
    DeviceStore(args.store).save(device)
    print(f"✅ Device {device.name} ({args.model}) written to {args.store}")


def cmd_device_negotiate(args):
    device = _open_device(args)
    if not args.channel.startswith("dir:"):
        print("channel must look like dir:/path", file=sys.stderr)
        return 2
    channel = DirectoryChannel(args.channel[len("dir:"):])
    epoch = args.epoch or ((device.latest_seed.epoch + 1) if device.latest_seed else 1)
    config = NegotiationConfig(args.password, args.party_id, args.parties, epoch)
    exchange = device.begin_seed_exchange(config)

    print(f"🔐 Party {args.party_id}/{args.parties} negotiating epoch {epoch}...")
    channel.send(exchange.start())
    result = None
    for round_no in range(1, args.parties):
        out = device.continue_seed_exchange(channel.receive(args.party_id, round_no, timeout=args.timeout))
        if isinstance(out, SeedRecord):
            result = out
        else:
            channel.send(out)
    DeviceStore(args.store).save(device)
    print(f"✅ Seed fingerprint: {result.fingerprint}")


def cmd_device_register(args):
    device = _open_device(args)
    receipt = device.register_account(_client(args), args.username)
    DeviceStore(args.store).save(device)
    print(f"✅ Account {receipt.username} created on {receipt.service_id}")
    print(f"   OVPK {receipt.ovpk_fingerprint}, capacity {receipt.capacity}")


def cmd_device_login(args):
    device = _open_device(args)
    proof = device.login_or_enroll(_client(args), args.username, auto_update=not args.no_update)
    DeviceStore(args.store).save(device)
    if proof.outcome == "enrolled":
        print("✨ seamless enrollment performed")
    if proof.outcome == "reenroll_required":
        print("⚠️ credential was revoked; run login again to re-enroll")
        return
    print(f"✅ Signed in to {proof.service_id} as {proof.username}")
    if proof.update is not None:
        print(f"🔄 OVK update: {proof.update.status}")


def cmd_device_update(args):
    device = _open_device(args)
    outcome = device.send_update(_client(args), args.username)
    DeviceStore(args.store).save(device)
    print(f"🔄 OVK update: {outcome.status}")


def cmd_device_show(args):
    device = DeviceStore(args.store).load()
    print(f"📱 {device.name} ({device.identity.model_name})")
    for seed in device.seeds:
        print(f"   seed epoch {seed.epoch}: {seed.fingerprint} shared with {seed.peer_models}")
    for cred in device.credentials.values():
        print(f"   {cred.service_id}: {cred.username} / {cred.credential_id}")
    for service_id in device.pending_updates:
        print(f"   pending update for {service_id}")


# ============================================================================
# SERVICE COMMANDS
# ============================================================================

def cmd_service_policy(args):
    maker = Manufacturer.load(args.manufacturer)
    models = frozenset(args.model)
    policy = TrustPolicy(
        trusted_roots=frozenset([maker.root_point]),
        compliant_models=models,
        secure_storage_models=frozenset(args.secure_model or args.model),
    )
    save_policy(policy, args.out)
    print(f"✅ Trust policy written to {args.out}")


def cmd_service_serve(args):
    import uvicorn
    from api import create_app
    from src.service.relying_party import RelyingParty, ServiceSettings

    config = ServiceSettings.load(args.config)
    app = create_app(RelyingParty.from_settings(config))
    print(f"🚀 Serving {config.service_id} on {args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port)


# ============================================================================
# SCENARIO / RACE
# ============================================================================

def cmd_scenario_run(args):
    report = run_scenario(args.path, transport=args.transport)
    lines = report.to_jsonl()
    if args.report:
        Path(args.report).write_text(lines + "\n", encoding="utf-8")
    print(lines)
    if not report.passed:
        for step in report.failures():
            print(f"❌ step {step.step}: {step.reason}", file=sys.stderr)
        return 1
    print(f"✅ {len(report.steps)} steps passed", file=sys.stderr)


def cmd_race_run(args):
    config = RaceConfig(n=args.n, n_u=args.n_u, n_a=args.n_a, attacker_first=args.attacker_first)
    winner = run_race(config, ordering_seed=args.seed)
    oracle = set(race_oracle(config).values())
    print(json.dumps({**config.model_dump(), "seed": args.seed, "winner": winner,
                      "oracle": sorted(oracle)}))


def cmd_race_table(args):
    for row in race_table(args.max_n):
        print(json.dumps(row))


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovk", description="OVK authenticator and service toolkit")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    groups = parser.add_subparsers(dest="group", required=True)

    device = groups.add_parser("device").add_subparsers(dest="command", required=True)

    p = device.add_parser("create")
    p.add_argument("--store", required=True)
    p.add_argument("--manufacturer", required=True, help="manufacturer key file, created if missing")
    p.add_argument("--manufacturer-id", default="ACME")
    p.add_argument("--model", required=True)
    p.add_argument("--name")
    p.set_defaults(func=cmd_device_create)

    p = device.add_parser("negotiate")
    p.add_argument("--store", required=True)
    p.add_argument("--party-id", type=int, required=True)
    p.add_argument("--parties", type=int, required=True)
    p.add_argument("--password", required=True)
    p.add_argument("--channel", required=True, help="dir:/path/to/round/files")
    p.add_argument("--epoch", type=int)
    p.add_argument("--timeout", type=float, default=settings.CHANNEL_TIMEOUT_SECS)
    p.set_defaults(func=cmd_device_negotiate)

    for name, func in (("register", cmd_device_register), ("login", cmd_device_login),
                       ("update", cmd_device_update)):
        p = device.add_parser(name)
        p.add_argument("--store", required=True)
        p.add_argument("--service", required=True, help="service base URL")
        p.add_argument("--username", required=True)
        if name == "login":
            p.add_argument("--no-update", action="store_true")
        p.set_defaults(func=func)

    p = device.add_parser("show")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_device_show)

    service = groups.add_parser("service").add_subparsers(dest="command", required=True)

    p = service.add_parser("policy")
    p.add_argument("--manufacturer", required=True)
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--secure-model", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_service_policy)

    p = service.add_parser("serve")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default=settings.SERVICE_HOST)
    p.add_argument("--port", type=int, default=settings.SERVICE_PORT)
    p.set_defaults(func=cmd_service_serve)

    scenario = groups.add_parser("scenario").add_subparsers(dest="command", required=True)
    p = scenario.add_parser("run")
    p.add_argument("path")
    p.add_argument("--transport", choices=["loopback", "http"], default="loopback")
    p.add_argument("--report", help="also write the JSON lines report here")
    p.set_defaults(func=cmd_scenario_run)

    race = groups.add_parser("race").add_subparsers(dest="command", required=True)
    p = race.add_parser("run")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--n-u", type=int, required=True)
    p.add_argument("--n-a", type=int, required=True)
    p.add_argument("--attacker-first", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_race_run)

    p = race.add_parser("table")
    p.add_argument("--max-n", type=int, default=5)
    p.set_defaults(func=cmd_race_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(args.log_level)
    try:
        return args.func(args) or 0
    except OvkError as e:
        print(f"{e.name}: {e.detail}", file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"invalid arguments: {e.errors()[0]['msg']}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
