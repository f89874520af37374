"""``qsync`` command line: daemon runner, maintenance commands and simulator.

Node commands talk to a running daemon over its control socket. When no
daemon is running they open the node's state directly (offline mode), run the
one operation and exit; queued network work is picked up at the next ``run``.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import sys
from pathlib import Path

import click

from qsync.commands import OfflineEnv, run_command
from qsync.daemon import (
    CONTROL_SOCKET,
    WAL_FILE,
    AlreadyRunning,
    NodeLock,
    control_request,
    run_daemon,
    state_dir_for,
)
from qsync.errors import QSyncError
from qsync.message import LinkStatus
from qsync.node import Node
from qsync.scenario import acceptance_scenario
from qsync.sim import run_scenario
from qsync.sync import PermissionPolicy
from qsync.topology import generate_topology, load_topology
from qsync.wal import WAL


class Ctx:
    def __init__(self, config: str | None, node: str | None, as_json: bool):
        self.config = config
        self.node = node
        self.as_json = as_json

    def topology(self):
        if not self.config:
            raise click.UsageError("--config is required")
        return load_topology(Path(self.config).read_text())

    def node_id(self) -> str:
        if not self.node:
            raise click.UsageError("--node is required")
        return self.node


def _emit(ctx: Ctx, response: dict, render) -> None:
    if ctx.as_json:
        click.echo(json.dumps(response, sort_keys=True))
    elif response["ok"]:
        render(response["result"])
    else:
        click.echo(f"error: {response['error']}", err=True)
    if not response["ok"]:
        sys.exit(1)


def _invoke(ctx: Ctx, cmd: str, args: dict) -> dict:
    """Run ``cmd`` via the daemon if one is up, else offline against the state dir."""
    node_id = ctx.node_id()
    state = state_dir_for(node_id)
    if (state / CONTROL_SOCKET).exists():
        try:
            return asyncio.run(control_request(state, cmd, args))
        except (OSError, asyncio.TimeoutError):
            pass  # stale socket, fall through to offline mode
    topo = ctx.topology()
    lock = NodeLock(state)
    try:
        lock.acquire()
    except AlreadyRunning as exc:
        return {"ok": False, "error": str(exc)}
    wal = None
    try:
        wal = WAL(state / WAL_FILE, fsync=True)
        env = OfflineEnv()
        node = Node(node_id, topo, wal, env, default_link=LinkStatus.OFFLINE)
        response = run_command(node, cmd, args)
        env.drain()
        return response
    except QSyncError as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
    finally:
        if wal is not None:
            wal.close()
        lock.release()


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), help="Topology config file.")
@click.option("--node", "node", help="Node id to operate on.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(click_ctx, config, node, as_json, verbose):
    """Queue-based multi-branch database synchronization."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    click_ctx.obj = Ctx(config, node, as_json)


@main.command()
@click.option("--policy", type=click.Path(exists=True, dir_okay=False), help="Receiver permission rules.")
@click.pass_obj
def run(ctx: Ctx, policy):
    """Start the node daemon in the foreground."""
    topo = ctx.topology()
    node_id = ctx.node_id()
    pol = PermissionPolicy.parse(Path(policy).read_text()) if policy else None
    try:
        run_daemon(topo, node_id, state_dir_for(node_id), policy=pol)
    except AlreadyRunning as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except QSyncError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(1)


@main.command()
@click.pass_obj
def stop(ctx: Ctx):
    """Ask a running daemon to shut down."""
    state = state_dir_for(ctx.node_id())
    if not (state / CONTROL_SOCKET).exists():
        _emit(ctx, {"ok": False, "error": "daemon not running"}, None)
    _emit(ctx, asyncio.run(control_request(state, "shutdown", {})), lambda r: click.echo("stopping"))


def _render_status(r: dict) -> None:
    click.echo(f"node {r['node']} ({r['role']})  recovered {r['recovered']}")
    click.echo("queues:")
    for name, depth in r["queues"].items():
        click.echo(f"  {name:<16} {depth}")
    click.echo("outgoing:")
    for target, o in r["outgoing"].items():
        click.echo(f"  {target:<16} {o['pending']} pending  {o['link']}")
    click.echo(f"outbox pending: {r['outbox_pending']}")
    click.echo(f"conflicts: {r['conflicts']}")
    click.echo(f"dead letters: {len(r['dead_letters'])}")
    for d in r["dead_letters"]:
        click.echo(f"  {d['message']} {d['reason']} {d['detail']}")


@main.command()
@click.pass_obj
def status(ctx: Ctx):
    """Queue depths, outgoing queues, outbox and dead letters."""
    _emit(ctx, _invoke(ctx, "status", {}), _render_status)


@main.command("force-dispatch")
@click.pass_obj
def force_dispatch(ctx: Ctx):
    """Trigger the dispatcher now."""
    _emit(ctx, _invoke(ctx, "force_dispatch", {}), lambda r: click.echo("dispatch scheduled"))


@main.command("exec")
@click.argument("sql")
@click.pass_obj
def exec_(ctx: Ctx, sql):
    """Execute a client statement and queue it for replication."""
    _emit(
        ctx,
        _invoke(ctx, "exec", {"sql": sql}),
        lambda r: click.echo(f"{r['rows']} row(s); outbox pending {r['outbox_pending']}"),
    )


@main.command()
@click.option("--direction", type=click.Choice(["SENT", "RECEIVED"]))
@click.pass_obj
def journal(ctx: Ctx, direction):
    """List journal entries."""

    def render(r):
        for e in r["entries"]:
            click.echo("\t".join(str(e[k]) for k in sorted(e)))

    _emit(ctx, _invoke(ctx, "journal", {"direction": direction}), render)


@main.command()
@click.argument("table")
@click.pass_obj
def dump(ctx: Ctx, table):
    """Print a table as TSV."""
    _emit(ctx, _invoke(ctx, "dump", {"table": table}), lambda r: click.echo(r["tsv"], nl=False))


@main.command()
@click.pass_obj
def digest(ctx: Ctx):
    """Print the state digest."""
    _emit(ctx, _invoke(ctx, "digest", {}), lambda r: click.echo(r["digest"]))


@main.group()
def mail():
    """Store-and-forward mail between nodes."""


@mail.command("send")
@click.option("--to", "to", required=True)
@click.option("--subject", default="")
@click.option("--body", default="")
@click.option("--attach", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--plain", is_flag=True, help="Send without encryption.")
@click.pass_obj
def mail_send(ctx: Ctx, to, subject, body, attach, plain):
    args = {
        "to": to,
        "subject": subject,
        "body": body,
        "attachments": [
            {"name": Path(p).name, "b64": base64.b64encode(Path(p).read_bytes()).decode("ascii")}
            for p in attach
        ],
    }
    if plain:
        args["encrypted"] = False
    _emit(ctx, _invoke(ctx, "mail_send", args), lambda r: click.echo(r["mail_id"]))


@mail.command("inbox")
@click.option("--ack", is_flag=True, help="Remove fetched mail from the inbox.")
@click.option("--save-dir", type=click.Path(file_okay=False), help="Write attachments here.")
@click.pass_obj
def mail_inbox(ctx: Ctx, ack, save_dir):
    def render(r):
        for m in r["mails"]:
            click.echo(f"{m['mail_id']} from {m['from']} via {'>'.join(m['hops'])}: {m['subject']}")
            if m["body"]:
                click.echo(f"  {m['body']}")
            for a in m["attachments"]:
                click.echo(f"  [{a['name']}] {a['size']} bytes")
                if save_dir:
                    out = Path(save_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    (out / a["name"]).write_bytes(base64.b64decode(a["b64"]))

    _emit(ctx, _invoke(ctx, "mail_inbox", {"ack": ack}), render)


@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, type=click.IntRange(0, 2**64 - 1), show_default=True)
@click.option("--max-time", default=3_600_000, type=int, show_default=True, help="Simulated ms.")
@click.pass_obj
def sim(ctx: Ctx, scenario, seed, max_time):
    """Run a simulated enterprise and print the verdict and digests."""
    topo = ctx.topology()
    result, _ = run_scenario(topo, Path(scenario).read_text(), seed, max_time=max_time)
    if ctx.as_json:
        click.echo(json.dumps(
            {"verdict": result.verdict, "clock": result.clock, "digests": result.digests},
            sort_keys=True,
        ))
    else:
        click.echo(result.render(), nl=False)
    sys.exit(0 if result.verdict == "CONVERGED" else 1)


@main.command("gen-topology")
@click.option("--branches", default=5, show_default=True)
@click.option("--base-port", type=int)
@click.option("--mail-key", help="64 hex chars.")
def gen_topology(branches, base_port, mail_key):
    """Print a hub-and-spoke topology config."""
    key = bytes.fromhex(mail_key) if mail_key else None
    click.echo(generate_topology(branches, base_port=base_port, mail_key=key), nl=False)


@main.command("gen-scenario")
@click.option("--branches", default=5, show_default=True)
@click.option("--statements", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--topology-out", type=click.Path(dir_okay=False), help="Also write the matching topology.")
def gen_scenario(branches, statements, seed, topology_out):
    """Print the faulty multi-branch convergence scenario."""
    topo, scen = acceptance_scenario(branches, statements, seed)
    if topology_out:
        Path(topology_out).write_text(topo)
    click.echo(scen, nl=False)


if __name__ == "__main__":
    main()
