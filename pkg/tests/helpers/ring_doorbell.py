"""Child process: ring an inherited doorbell ``count`` times by ``amount``."""
import os
import sys

fd, count, amount = (int(x) for x in sys.argv[1:4])
for _ in range(count):
    os.eventfd_write(fd, amount)
