"""Child process: join a manager, announce readiness, then never serve."""
import sys
import time

from shmslice.handshake import worker_join

joined = worker_join(sys.argv[1], timeout=20)
print("joined", joined.slice.slice_id, flush=True)
time.sleep(120)
