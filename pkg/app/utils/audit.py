import logging
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone

logger = logging.getLogger('app.audit')


@dataclass(frozen=True)
class AuditEntry:
    timestamp: datetime
    action: str
    resource_type: str = None
    resource_id: str = None
    details: dict = field(default_factory=dict)


class AuditLog:
    """Bounded in-memory audit trail of gateway decisions"""

    def __init__(self, maxlen=100000):
        self.entries = deque(maxlen=maxlen)

    def log_action(self, action, resource_type=None, resource_id=None, details=None):
        """
        Record a gateway action
        Should be called at the moment the decision is taken
        """
        try:
            entry = AuditEntry(datetime.now(timezone.utc), action, resource_type, resource_id, dict(details or {}))
            self.entries.append(entry)
            logger.debug(f'{action} {resource_type}={resource_id} {entry.details}')
            return entry
        except Exception as e:
            # Don't let audit logging failures break dispatch
            logger.error(f'Audit logging error: {e}')
            return None

    def dispatches(self):
        return [e for e in self.entries if e.action == 'dispatch']

    def removed_dispatches(self):
        """Dispatches whose target was Removed at dispatch time; must stay empty"""
        return [e for e in self.dispatches() if e.details.get('state') == 'Removed']

    def __len__(self):
        return len(self.entries)
