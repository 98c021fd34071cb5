import functools
import threading
import time


def retry(times):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            last = None
            for _ in range(times):
                try:
                    return fn(*args, **kwargs)
                except RuntimeError as exc:
                    last = exc
            raise last
        return inner
    return wrap


class Job:
    def __init__(self, name, action):
        self.name = name
        self.action = action
        self.done = False

    def run(self):
        self.action()
        self.done = True


class Scheduler:
    def __init__(self):
        self.jobs = []
        self.lock = threading.Lock()

    def add(self, job):
        with self.lock:
            self.jobs.append(job)

    def run_all(self):
        threads = [threading.Thread(target=job.run) for job in self.jobs]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return [job.name for job in self.jobs if job.done]


def delay(seconds):
    start = time.monotonic()
    while time.monotonic() - start < seconds:
        pass
