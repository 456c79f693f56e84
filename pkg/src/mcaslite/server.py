"""The shard server process.

One single-owner thread per configured shard runs the whole shard: it
accepts sessions, decodes frames, drives the engine and index, executes
plugin callbacks, and emits responses.  Mutations are persisted by the
engine before the acknowledgment frame is written, so a status on the
wire is a durability receipt.

Sessions are served round-robin, one frame per ready session per loop
turn, which keeps competing clients at roughly equal shares of a
saturated shard.  A request that must wait (an ADO invocation in flight,
or a key locked by one) parks: the shard keeps serving everyone else and
that session's later frames queue in arrival order.

Pools are the isolation boundary: a session can only address pools it
has opened, and pool delete requires that no other session holds it.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import selectors
import signal as _signal
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from . import protocol as wire
from .ado import (
    CB_ALLOC,
    CB_CREATE_KEY,
    CB_ERASE_KEY,
    CB_FIND_KEY,
    CB_FREE,
    CB_GET_POOL_INFO,
    CB_GET_REF_VECTOR,
    CB_ITERATE,
    CB_OPEN_KEY,
    CB_RESIZE_VALUE,
    CB_UNLOCK,
    MSG_CALLBACK,
    MSG_WORK_DONE,
    AdoManager,
    CallbackReply,
    CallbackRequest,
    SIGNAL_PREFIX,
    WorkRequest,
    WorkResponse,
    pack_pair,
    pack_ref_vector,
)
from .arena import CrashSimBackend, PersistentArena
from .config import Config, ShardConfig, load_config
from .engines import make_backend
from .errors import (
    AdoFaultError,
    AlreadyExistsError,
    BadPoolError,
    BusyError,
    KeyNotFoundError,
    McasError,
    NoIndexError,
    ProtocolError,
    Status,
    TooLargeError,
)
from .locks import LOCK_READ, LOCK_WRITE, LockTable
from .secondary_index import SecondaryIndex

log = logging.getLogger("mcaslite.server")

INDEX_ADD = (b"add-index", b"AddIndex::VolatileTree")
INDEX_REMOVE = (b"remove-index", b"RemoveIndex::VolatileTree")


class Statistics:
    def __init__(self):
        self.counters: dict[str, int] = {}
        self.started_ns = time.time_ns()

    def bump(self, name: str, n: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + n

    def items(self) -> list[tuple[bytes, int]]:
        out = [(name.encode(), value)
               for name, value in sorted(self.counters.items())]
        out.append((b"uptime_ms", (time.time_ns() - self.started_ns) // 10**6))
        return out


class Session:
    _ids = itertools.count(1)

    def __init__(self, sock: socket.socket, addr):
        self.id = next(self._ids)
        self.sock = sock
        self.addr = addr
        self.reader = wire.FrameReader()
        self.frames: deque[wire.Frame] = deque()
        self.pools: set[int] = set()
        self.inflight = 0  # parked requests; blocks later frames
        self.out = bytearray()  # unsent response bytes
        self.write_interest = False
        self.closed = False


OUTBUF_LIMIT = 256 << 20  # close a session that stops draining responses


@dataclass
class PendingWork:
    work_id: int
    kind: str                 # "invoke" | "signal"
    pool_id: int
    session: Optional[Session]
    request_id: int
    req_opcode: int
    response: Optional[wire.Response] = None  # prebuilt (signal path)


class Shard:
    def __init__(self, index: int, cfg: ShardConfig, global_cfg: Config,
                 arena: Optional[PersistentArena] = None,
                 host: str = "127.0.0.1"):
        self.index = index
        self.cfg = cfg
        self.global_cfg = global_cfg
        self.host = host
        self.arena = arena
        self.backend = None
        self.pools: dict[int, object] = {}
        self.pool_names: dict[int, bytes] = {}
        self.open_counts: dict[int, int] = {}
        self.indexes: dict[int, SecondaryIndex] = {}
        self.locks = LockTable()
        self.managers: dict[int, AdoManager] = {}
        self.pending: dict[int, PendingWork] = {}
        self.waiting: deque[tuple[Session, wire.Frame]] = deque()
        self.stats = Statistics()
        self.sessions: list[Session] = []
        self._work_ids = itertools.count(1)
        self._listener: Optional[socket.socket] = None
        self._selector: Optional[selectors.BaseSelector] = None
        self._stop = threading.Event()
        self._owner_thread: Optional[int] = None

    # -- startup -----------------------------------------------------------

    def open_storage(self) -> None:
        if self.backend is not None:
            return
        if self.cfg.default_backend == "mapstore":
            self.backend = make_backend("mapstore")
            return
        if self.arena is None:
            dax = self.cfg.dax_config[0]
            if len(self.cfg.dax_config) > 1:
                log.warning("shard %d: only the first dax entry is used",
                            self.index)
            self.arena = PersistentArena.open_or_create(dax.path, dax.size)
        self.backend = make_backend(self.cfg.default_backend, self.arena,
                                    self.cfg.base_size)

    def _assert_owner(self) -> None:
        me = threading.get_ident()
        if self._owner_thread is None:
            self._owner_thread = me
        assert self._owner_thread == me, "shard touched off its own thread"

    # -- event loop ----------------------------------------------------------

    def serve(self, started: Optional[threading.Event] = None) -> None:
        self.open_storage()
        if self.cfg.core >= 0:
            try:
                os.sched_setaffinity(0, {self.cfg.core})
            except (OSError, AttributeError):
                log.warning("shard %d: cannot pin to core %d", self.index,
                            self.cfg.core)
        self._listener = socket.create_server((self.host, self.cfg.port),
                                              reuse_port=False)
        self._listener.setblocking(False)
        self._selector = selectors.DefaultSelector()
        self._selector.register(self._listener, selectors.EVENT_READ, None)
        log.info("shard %d serving on %s:%d backend=%s", self.index,
                 self.host, self.cfg.port, self.cfg.default_backend)
        if started is not None:
            started.set()
        try:
            while not self._stop.is_set():
                self._turn()
        finally:
            self._teardown()

    def stop(self) -> None:
        self._stop.set()

    def _teardown(self) -> None:
        for manager in self.managers.values():
            manager.shutdown()
        for session in self.sessions:
            try:
                session.sock.close()
            except OSError:
                pass
        if self._listener is not None:
            self._listener.close()
        if self._selector is not None:
            self._selector.close()
        if self.backend is not None:
            try:
                self.backend.close()
            except Exception:
                pass

    def _turn(self) -> None:
        self._assert_owner()
        busy = bool(self.pending) or bool(self.waiting)
        timeout = 0.0005 if busy else 0.05
        for key, events in self._selector.select(timeout):
            if key.data is None:
                self._accept()
                continue
            if events & selectors.EVENT_WRITE:
                self._flush(key.data)
            if events & selectors.EVENT_READ:
                self._read_session(key.data)
        served = True
        while served:
            served = False
            for session in list(self.sessions):
                if session.closed or session.inflight > 0:
                    continue
                if session.frames:
                    frame = session.frames.popleft()
                    self._handle_frame(session, frame, fresh=True)
                    served = True
        self._poll_ado()

    def _accept(self) -> None:
        try:
            sock, addr = self._listener.accept()
        except OSError:
            return
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        session = Session(sock, addr)
        self.sessions.append(session)
        self._selector.register(sock, selectors.EVENT_READ, session)
        self.stats.bump("sessions.accepted")

    def _read_session(self, session: Session) -> None:
        try:
            data = session.sock.recv(1 << 20)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            data = b""
        if not data:
            self._close_session(session)
            return
        try:
            session.frames.extend(session.reader.feed(data))
        except ProtocolError as exc:
            log.warning("session %d: %s; closing", session.id, exc)
            self._close_session(session)

    def _close_session(self, session: Session) -> None:
        if session.closed:
            return
        session.closed = True
        for pool_id in session.pools:
            self.open_counts[pool_id] = max(
                0, self.open_counts.get(pool_id, 0) - 1)
        session.pools.clear()
        try:
            self._selector.unregister(session.sock)
        except (KeyError, ValueError):
            pass
        try:
            session.sock.close()
        except OSError:
            pass
        if session in self.sessions:
            self.sessions.remove(session)

    def _send(self, session: Session, payload: bytes) -> None:
        """Queue and opportunistically flush; never blocks the shard on a
        session that is not draining its responses."""
        if session.closed:
            return
        session.out += payload
        if len(session.out) > OUTBUF_LIMIT:
            log.warning("session %d: response backlog over %d bytes; closing",
                        session.id, OUTBUF_LIMIT)
            self._close_session(session)
            return
        self._flush(session)

    def _flush(self, session: Session) -> None:
        if session.closed:
            return
        while session.out:
            try:
                sent = session.sock.send(session.out)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                self._close_session(session)
                return
            if sent == 0:
                break
            del session.out[:sent]
        want_write = bool(session.out)
        if want_write != session.write_interest and self._selector is not None:
            session.write_interest = want_write
            events = selectors.EVENT_READ
            if want_write:
                events |= selectors.EVENT_WRITE
            try:
                self._selector.modify(session.sock, events, session)
            except (KeyError, ValueError, OSError):
                pass

    def _respond(self, session: Session, request_id: int, req_opcode: int,
                 resp: wire.Response) -> None:
        self._send(session, wire.encode_response(request_id, req_opcode, resp))

    # -- frame handling ---------------------------------------------------------

    def _handle_frame(self, session: Session, frame: wire.Frame,
                      fresh: bool) -> None:
        t0 = time.perf_counter_ns()
        try:
            msg = wire.decode_request(frame)
        except ProtocolError as exc:
            log.warning("session %d: %s; closing", session.id, exc)
            self._close_session(session)
            return
        op_name = wire.OPCODE_NAMES.get(frame.opcode, "?")
        try:
            parked = self._dispatch(session, frame, msg)
        except McasError as exc:
            parked = False
            self._respond(session, frame.request_id, frame.opcode,
                          wire.Response(status=exc.status))
            self.stats.bump(f"op.{op_name}.errors")
        except Exception:
            parked = False
            log.exception("internal error handling %s", op_name)
            self._respond(session, frame.request_id, frame.opcode,
                          wire.Response(status=Status.E_PROTOCOL))
        if fresh:
            if parked:
                session.inflight += 1
        elif not parked:
            # a replayed (previously parked) request just answered; the
            # session may resume its queued frames
            session.inflight = max(0, session.inflight - 1)
        self.stats.bump(f"op.{op_name}.count")
        self.stats.bump(f"op.{op_name}.latency_ns",
                        time.perf_counter_ns() - t0)

    def _dispatch(self, session: Session, frame: wire.Frame, msg) -> bool:
        """Returns True when the response is deferred (request parked)."""
        op = frame.opcode
        rid = frame.request_id
        if op == wire.OP_HANDSHAKE:
            if msg.version != wire.PROTO_VERSION:
                self._respond(session, rid, op,
                              wire.Response(status=Status.E_VERSION))
            else:
                self._respond(session, rid, op, wire.Response(
                    status=Status.S_OK, version=wire.PROTO_VERSION))
            return False
        if op == wire.OP_GET_STATISTICS:
            self._respond(session, rid, op, wire.Response(
                status=Status.S_OK, items=self.stats.items()))
            return False
        if op == wire.OP_CREATE_POOL:
            pool = self.backend.create_pool(msg.name, msg.size)
            self._register_open(session, pool)
            self._respond(session, rid, op, wire.Response(
                status=Status.S_OK, pool=pool.pool_id))
            return False
        if op == wire.OP_OPEN_POOL:
            pool = self.backend.open_pool(msg.name)
            if pool is None:
                if not msg.create_on_demand:
                    raise BadPoolError(msg.name.decode("latin1"))
                pool = self.backend.create_pool(msg.name, msg.size)
            self._register_open(session, pool)
            self._respond(session, rid, op, wire.Response(
                status=Status.S_OK, pool=pool.pool_id))
            return False
        if op == wire.OP_CLOSE_POOL:
            if msg.pool not in session.pools:
                raise BadPoolError(str(msg.pool))
            session.pools.discard(msg.pool)
            self.open_counts[msg.pool] = max(
                0, self.open_counts.get(msg.pool, 0) - 1)
            self._respond(session, rid, op, wire.Response(status=Status.S_OK))
            return False
        if op == wire.OP_DELETE_POOL:
            self._delete_pool(session, msg.name)
            self._respond(session, rid, op, wire.Response(status=Status.S_OK))
            return False

        # pool-scoped operations below
        pool = self._pool_of(session, msg.pool)
        if op == wire.OP_CONFIGURE_POOL:
            self._configure_pool(pool, msg.command)
            self._respond(session, rid, op, wire.Response(status=Status.S_OK))
            return False
        if op in (wire.OP_PUT, wire.OP_PUT_DIRECT):
            if op == wire.OP_PUT and len(msg.value) >= wire.SMALL_LIMIT:
                raise TooLargeError("use put_direct for values >= 2 MiB")
            if self._key_blocked(msg.key, for_write=True):
                self.waiting.append((session, frame))
                return True
            pool.put(msg.key, msg.value, no_overwrite=msg.no_overwrite)
            index = self.indexes.get(pool.pool_id)
            if index is not None:
                index.add(msg.key)
            self.stats.bump("bytes.written", len(msg.value))
            return self._after_mutation(session, frame, pool, msg.key,
                                        "post-put")
        if op in (wire.OP_GET, wire.OP_GET_DIRECT):
            if self._key_blocked(msg.key, for_write=False):
                self.waiting.append((session, frame))
                return True
            value = pool.get(msg.key)
            if op == wire.OP_GET and len(value) >= wire.SMALL_LIMIT:
                raise TooLargeError("use get_direct for values >= 2 MiB")
            self.stats.bump("bytes.read", len(value))
            self._respond(session, rid, op, wire.Response(
                status=Status.S_OK, value=value))
            return False
        if op == wire.OP_ERASE:
            if self._key_blocked(msg.key, for_write=True):
                self.waiting.append((session, frame))
                return True
            pool.erase(msg.key)
            index = self.indexes.get(pool.pool_id)
            if index is not None:
                index.discard(msg.key)
            return self._after_mutation(session, frame, pool, msg.key,
                                        "post-erase")
        if op == wire.OP_PUT_DIRECT_OFFSET:
            if self._key_blocked(msg.key, for_write=True):
                self.waiting.append((session, frame))
                return True
            pool.write_value_slice(msg.key, msg.offset, msg.data)
            self.stats.bump("bytes.written", len(msg.data))
            self._respond(session, rid, op, wire.Response(status=Status.S_OK))
            return False
        if op == wire.OP_GET_DIRECT_OFFSET:
            if self._key_blocked(msg.key, for_write=False):
                self.waiting.append((session, frame))
                return True
            data = pool.read_value_slice(msg.key, msg.offset, msg.length)
            self.stats.bump("bytes.read", len(data))
            self._respond(session, rid, op, wire.Response(
                status=Status.S_OK, value=data))
            return False
        if op == wire.OP_GET_ATTRIBUTES:
            attrs = pool.attributes(msg.key if msg.key else None)
            items = [(k.encode(), int(v)) for k, v in sorted(attrs.items())]
            self._respond(session, rid, op, wire.Response(
                status=Status.S_OK, items=items))
            return False
        if op == wire.OP_FIND:
            index = self.indexes.get(pool.pool_id)
            if index is None:
                raise NoIndexError("configure the pool with add-index first")
            key, position = index.find(msg.expression, msg.kind, msg.position)
            self._respond(session, rid, op, wire.Response(
                status=Status.S_OK, key=key, position=position))
            return False
        if op == wire.OP_INVOKE_ADO:
            return self._invoke_ado(session, frame, pool, msg)
        if op == wire.OP_INVOKE_PUT_ADO:
            return self._invoke_put_ado(session, frame, pool, msg)
        raise ProtocolError(f"unhandled opcode {op}")

    # -- pool plumbing ------------------------------------------------------------

    def _register_open(self, session: Session, pool) -> None:
        if pool.pool_id not in session.pools:
            session.pools.add(pool.pool_id)
            self.open_counts[pool.pool_id] = \
                self.open_counts.get(pool.pool_id, 0) + 1
        self.pools[pool.pool_id] = pool
        self.pool_names[pool.pool_id] = pool.name
        if hasattr(pool, "ado_heap_size"):
            pool.ado_heap_size = self.cfg.ado_heap_size

    def _pool_of(self, session: Session, pool_id: int):
        if pool_id not in session.pools:
            raise BadPoolError(f"pool {pool_id} not open in this session")
        return self.pools[pool_id]

    def _delete_pool(self, session: Session, name: bytes) -> None:
        pool = self.backend.open_pool(name)
        if pool is None:
            raise BadPoolError(name.decode("latin1"))
        pid = pool.pool_id
        others = self.open_counts.get(pid, 0) - (1 if pid in session.pools else 0)
        if others > 0:
            raise BusyError(f"pool {name!r} open in another session")
        if pid in session.pools:
            session.pools.discard(pid)
        self.open_counts.pop(pid, None)
        manager = self.managers.pop(pid, None)
        if manager is not None:
            manager.shutdown()
        self.indexes.pop(pid, None)
        self.pools.pop(pid, None)
        self.backend.delete_pool(name)

    def _configure_pool(self, pool, command: bytes) -> None:
        if command in INDEX_ADD:
            if pool.pool_id in self.indexes:
                raise AlreadyExistsError("index already attached")
            self.indexes[pool.pool_id] = SecondaryIndex(pool.keys())
        elif command in INDEX_REMOVE:
            self.indexes.pop(pool.pool_id, None)
        else:
            raise ProtocolError(f"unknown configure command {command!r}")

    # -- locking --------------------------------------------------------------------

    def _key_blocked(self, key: bytes, for_write: bool) -> bool:
        return self.locks.is_locked(key, for_write)

    # -- ADO ---------------------------------------------------------------------------

    def _manager_for(self, pool) -> AdoManager:
        manager = self.managers.get(pool.pool_id)
        if manager is None:
            if not self.cfg.ado_plugins:
                raise AdoFaultError("no ado_plugins configured")
            mode = self.global_cfg.ado_mode
            accessor = None
            arena_path = None
            capacity = 0
            extents = []
            if self.arena is not None:
                extents = [(d.offset, d.length)
                           for d in self.arena.regions_of(pool.pool_id)]
                capacity = self.arena.capacity
                if isinstance(self.arena.backend, CrashSimBackend):
                    mode = "inproc"
                else:
                    arena_path = self.arena.path
                accessor = self.arena
            else:
                mode = "inproc"
                raise AdoFaultError("ADO requires an arena-backed pool")
            manager = AdoManager(
                self.index, pool.pool_id, list(self.cfg.ado_plugins),
                dict(self.cfg.ado_params), mode, self.global_cfg.ado_path,
                arena_path, capacity, extents, inproc_accessor=accessor)
            self.managers[pool.pool_id] = manager
        return manager

    def _invoke_ado(self, session: Session, frame: wire.Frame, pool, msg) -> bool:
        manager = self._manager_for(pool)
        work_id = next(self._work_ids)
        if not self.locks.try_acquire(msg.key, LOCK_WRITE, work_id):
            self.waiting.append((session, frame))
            return True
        try:
            if msg.value_size > 0:
                off, length, new_root = pool.value_descriptor(
                    msg.key, min_size=msg.value_size, create=True)
            else:
                off, length, new_root = pool.value_descriptor(msg.key)
            index = self.indexes.get(pool.pool_id)
            if index is not None and new_root:
                index.add(msg.key)
            work = WorkRequest(work_id, manager.next_plugin(), msg.key,
                               [(off, length)], msg.request, new_root)
            manager.send_work(work)
        except Exception:
            self.locks.release_all(work_id)
            raise
        self.pending[work_id] = PendingWork(
            work_id, "invoke", pool.pool_id, session, frame.request_id,
            frame.opcode)
        return True

    def _invoke_put_ado(self, session: Session, frame: wire.Frame, pool,
                        msg) -> bool:
        manager = self._manager_for(pool)
        work_id = next(self._work_ids)
        if not self.locks.try_acquire(msg.key, LOCK_WRITE, work_id):
            self.waiting.append((session, frame))
            return True
        try:
            detached = bool(msg.flags & wire.ADO_FLAG_DETACHED)
            if detached:
                root_size = max(msg.root_len, 1)
                off, length, new_root = pool.value_descriptor(
                    msg.key, min_size=root_size, create=True)
                det_off = pool.ado_alloc(max(len(msg.value), 1))
                if msg.value:
                    self.arena.write(det_off, msg.value)
                    self.arena.persist(det_off, len(msg.value))
                values = [(off, length), (det_off, len(msg.value))]
            else:
                existed = True
                try:
                    pool.get(msg.key)
                except KeyNotFoundError:
                    existed = False
                pool.put_forced(msg.key, msg.value)
                off, length = pool.store.value_extent(msg.key)
                new_root = not existed
                values = [(off, length)]
            index = self.indexes.get(pool.pool_id)
            if index is not None:
                index.add(msg.key)
            self.stats.bump("bytes.written", len(msg.value))
            work = WorkRequest(work_id, manager.next_plugin(), msg.key,
                               values, msg.request, new_root)
            manager.send_work(work)
        except Exception:
            self.locks.release_all(work_id)
            raise
        self.pending[work_id] = PendingWork(
            work_id, "invoke", pool.pool_id, session, frame.request_id,
            frame.opcode)
        return True

    def _after_mutation(self, session: Session, frame: wire.Frame, pool,
                        key: bytes, event: str) -> bool:
        """Persisted mutation done; dispatch a signal work if configured,
        withholding the acknowledgment until the plugin completes."""
        if event not in self.cfg.ado_signals or not self.cfg.ado_plugins:
            self._respond(session, frame.request_id, frame.opcode,
                          wire.Response(status=Status.S_OK))
            return False
        manager = self._manager_for(pool)
        work_id = next(self._work_ids)
        acquired = self.locks.try_acquire(key, LOCK_READ, work_id)
        assert acquired, "signal lock conflicts are impossible on one thread"
        try:
            desc = (0, 0)
            if event == "post-put":
                try:
                    desc = pool.store.value_extent(key)
                except Exception:
                    desc = (0, 0)
            request = SIGNAL_PREFIX + b"::" + event.encode()
            work = WorkRequest(work_id, manager.next_plugin(), key, [desc],
                               request, False)
            manager.send_work(work)
        except Exception:
            self.locks.release_all(work_id)
            log.exception("signal dispatch failed; acking the client anyway")
            self._respond(session, frame.request_id, frame.opcode,
                          wire.Response(status=Status.S_OK))
            return False
        self.pending[work_id] = PendingWork(
            work_id, "signal", pool.pool_id, session, frame.request_id,
            frame.opcode, response=wire.Response(status=Status.S_OK))
        self.stats.bump("ado.signals")
        return True

    def _poll_ado(self) -> None:
        if not self.managers:
            return
        for pool_id, manager in list(self.managers.items()):
            for kind, payload in manager.poll():
                if kind == MSG_WORK_DONE:
                    self._work_done(WorkResponse.decode(payload))
                elif kind == MSG_CALLBACK:
                    cb = CallbackRequest.decode(payload)
                    reply = self._execute_callback(pool_id, cb)
                    manager.send_callback_reply(reply)
                else:
                    log.warning("unexpected ADO message kind %d", kind)
            if manager.mode == "process" and manager.queue is not None \
                    and not manager.alive():
                self._ado_died(pool_id, manager)
        if self.waiting and not self.pending:
            self._retry_waiting()

    def _ado_died(self, pool_id: int, manager: AdoManager) -> None:
        log.error("ADO process for pool %d died; failing in-flight works",
                  pool_id)
        manager.shutdown(wait=0.1)
        manager.queue = None
        for work_id, pw in list(self.pending.items()):
            if pw.pool_id != pool_id:
                continue
            del self.pending[work_id]
            self.locks.release_all(work_id)
            self._finish_work(pw, wire.Response(status=Status.E_ADO_FAULT))
        self._retry_waiting()

    def _work_done(self, done: WorkResponse) -> None:
        pw = self.pending.pop(done.work_id, None)
        if pw is None:
            log.warning("completion for unknown work %d", done.work_id)
            return
        manager = self.managers.get(pw.pool_id)
        if manager is not None:
            manager.work_finished()
        self.locks.release_all(done.work_id)
        if pw.kind == "signal":
            if done.status != Status.S_OK:
                log.error("signal plugin fault (status %d); client still "
                          "receives the original status", done.status)
                self.stats.bump("ado.signal_faults")
            response = pw.response
        else:
            if done.status != Status.S_OK:
                response = wire.Response(status=Status(done.status))
            else:
                response = wire.Response(status=Status.S_OK,
                                         buffers=list(done.buffers))
            self.stats.bump("ado.invocations")
        self._finish_work(pw, response)
        self._retry_waiting()

    def _finish_work(self, pw: PendingWork, response: wire.Response) -> None:
        session = pw.session
        if session is None or session.closed:
            return
        self._respond(session, pw.request_id, pw.req_opcode, response)
        session.inflight = max(0, session.inflight - 1)

    def _retry_waiting(self) -> None:
        if not self.waiting:
            return
        retry = list(self.waiting)
        self.waiting.clear()
        for session, frame in retry:
            if session.closed:
                continue
            self._handle_frame(session, frame, fresh=False)

    # -- plugin callbacks (executed on the shard thread) ----------------------------

    def _execute_callback(self, pool_id: int, cb: CallbackRequest) -> CallbackReply:
        pool = self.pools.get(pool_id)
        if pool is None:
            return CallbackReply(int(Status.E_BAD_POOL))
        try:
            return self._callback_inner(pool, cb)
        except McasError as exc:
            return CallbackReply(int(exc.status))
        except Exception:
            log.exception("callback kind %d failed", cb.kind)
            return CallbackReply(int(Status.E_ADO_FAULT))

    def _callback_inner(self, pool, cb: CallbackRequest) -> CallbackReply:
        ok = int(Status.S_OK)
        if cb.kind == CB_CREATE_KEY:
            if not self.locks.try_acquire(cb.key, LOCK_WRITE, cb.work_id):
                return CallbackReply(int(Status.E_BUSY))
            off, length, created = pool.value_descriptor(
                cb.key, min_size=max(cb.a, 1), create=True)
            index = self.indexes.get(pool.pool_id)
            if index is not None:
                index.add(cb.key)
            return CallbackReply(ok, off, length)
        if cb.kind == CB_OPEN_KEY:
            if not self.locks.try_acquire(cb.key, LOCK_WRITE, cb.work_id):
                return CallbackReply(int(Status.E_BUSY))
            try:
                off, length, _ = pool.value_descriptor(cb.key)
            except McasError:
                self.locks.release(cb.key, cb.work_id)
                raise
            return CallbackReply(ok, off, length)
        if cb.kind == CB_ERASE_KEY:
            mode = self.locks.mode_of(cb.key)
            if mode is not None and cb.key not in self.locks.held_by(cb.work_id):
                return CallbackReply(int(Status.E_BUSY))
            pool.erase(cb.key)
            self.locks.release(cb.key, cb.work_id)
            index = self.indexes.get(pool.pool_id)
            if index is not None:
                index.discard(cb.key)
            return CallbackReply(ok)
        if cb.kind == CB_RESIZE_VALUE:
            data = pool.get(cb.key)
            size = cb.a
            data = data[:size] if len(data) >= size \
                else data + bytes(size - len(data))
            pool.put_forced(cb.key, data)
            off, length = pool.store.value_extent(cb.key)
            return CallbackReply(ok, off, length)
        if cb.kind == CB_ALLOC:
            return CallbackReply(ok, pool.ado_alloc(max(cb.a, 1)))
        if cb.kind == CB_FREE:
            pool.ado_free(cb.a)
            return CallbackReply(ok)
        if cb.kind == CB_GET_REF_VECTOR:
            items = []
            for key in list(pool.keys()):
                off, length, _ = pool.value_descriptor(key)
                items.append((key, off, length))
            return CallbackReply(ok, data=pack_ref_vector(items))
        if cb.kind == CB_ITERATE:
            keys = sorted(pool.keys())
            after = cb.key
            for key in keys:
                if key > after:
                    return CallbackReply(ok, data=pack_pair(key,
                                                            pool.get(key)))
            return CallbackReply(int(Status.E_NO_MATCH))
        if cb.kind == CB_FIND_KEY:
            index = self.indexes.get(pool.pool_id)
            if index is None:
                return CallbackReply(int(Status.E_NO_INDEX))
            key, _pos = index.find(cb.data, cb.a, cb.key)
            return CallbackReply(ok, data=key)
        if cb.kind == CB_GET_POOL_INFO:
            info = pool.attributes()
            return CallbackReply(ok, data=json.dumps(info).encode())
        if cb.kind == CB_UNLOCK:
            self.locks.release(cb.key, cb.work_id)
            return CallbackReply(ok)
        return CallbackReply(int(Status.E_PROTOCOL))

    # -- cluster hook ------------------------------------------------------------------

    def broadcast_cluster_event(self, sender: str, kind: str,
                                message: str) -> None:
        """Relay a membership event to every active plugin host."""
        for manager in self.managers.values():
            if manager.queue is not None:
                manager.send_cluster_event(sender, kind, message)


class ShardServer:
    """Runs every configured shard, one thread each."""

    def __init__(self, config: Config, host: Optional[str] = None):
        self.config = config
        self.host = host or config.addr
        self.shards = [Shard(i, cfg, config, host=self.host)
                       for i, cfg in enumerate(config.shards)]
        self.threads: list[threading.Thread] = []

    def start(self) -> None:
        for shard in self.shards:
            started = threading.Event()
            thread = threading.Thread(target=shard.serve, args=(started,),
                                      daemon=True,
                                      name=f"shard-{shard.index}")
            thread.start()
            if not started.wait(timeout=10):
                raise RuntimeError(f"shard {shard.index} failed to start")
            self.threads.append(thread)

    def stop(self) -> None:
        for shard in self.shards:
            shard.stop()
        for thread in self.threads:
            thread.join(timeout=5)

    def wait(self) -> None:
        for thread in self.threads:
            thread.join()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mcasd", description="shard server")
    parser.add_argument("--conf", required=True, help="JSON configuration")
    parser.add_argument("--debug", type=int, default=0,
                        help="debug level (0..3)")
    parser.add_argument("--device", default=None,
                        help="override the dax path of every shard "
                             "(shard i gets <override>.<i>)")
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG,
             logging.DEBUG)[min(args.debug, 3)]
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    with open(args.conf) as fh:
        config = load_config(fh.read())
    if args.device:
        for i, shard in enumerate(config.shards):
            for dax in shard.dax_config:
                dax.path = (f"{args.device}.{i}" if len(config.shards) > 1
                            else args.device)
    server = ShardServer(config)
    server.start()
    stop = threading.Event()
    for sig in (_signal.SIGINT, _signal.SIGTERM):
        _signal.signal(sig, lambda *_: stop.set())
    try:
        while not stop.is_set():
            stop.wait(0.2)
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    import sys
    sys.exit(main())
