"""Child process: join, answer each poll-mode round with the payload CRC32."""
import sys
import zlib

from shmslice.handshake import worker_join
from shmslice.signaling import SignalMode, await_data, complete

joined = worker_join(sys.argv[1], timeout=20)
ws, last = joined.slice, 0
while True:
    notice = await_data(ws, last, SignalMode.POLL, peer=joined.conn, timeout=60)
    last = notice.seq
    if notice.terminate:
        complete(ws, 0, SignalMode.POLL)
        break
    complete(ws, zlib.crc32(ws.read_payload(0, notice.data_len)), SignalMode.POLL)
