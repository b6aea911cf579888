"""Execution status vocabulary shared by adapters, metrics and the runner."""

COMPLETED = "completed"
FAILED = "failed"
TIMEOUT = "timeout"
SKIPPED = "skipped"

# Statuses that end a case; rows with these never re-run on resume.
TERMINAL = frozenset({COMPLETED, FAILED, TIMEOUT, SKIPPED})

# Statuses whose registration output is replaced by the initial moving
# landmarks for evaluation (the method produced nothing usable).
SUBSTITUTED = frozenset({FAILED, TIMEOUT, SKIPPED})

# Statuses counted as failures in dataset summaries.
FAILURE_LIKE = frozenset({FAILED, TIMEOUT})
