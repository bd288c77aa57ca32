"""Exception hierarchy shared by the store, namenode and harness layers."""


class NdbfsError(Exception):
    pass


# ---------------------------------------------------------------- store errors

class StoreError(NdbfsError):
    pass


class InvalidConfig(StoreError):
    pass


class DuplicateTable(StoreError):
    pass


class UnknownTable(StoreError):
    pass


class Timeout(StoreError):
    """Lock wait exceeded; the transaction has been aborted."""


class Unavailable(StoreError):
    """A touched partition has no alive datanode in its node group."""


class LockNotHeld(StoreError):
    pass


class LockUpgrade(StoreError):
    """A Shared lock holder asked for Exclusive on the same row."""


class TxInactive(StoreError):
    pass


# ------------------------------------------------------------ namespace errors

class FsError(NdbfsError):
    pass


class InvalidPath(FsError):
    pass


class NotFound(FsError):
    pass


class AlreadyExists(FsError):
    pass


class PermissionDenied(FsError):
    pass


class NotEmpty(FsError):
    pass


class NotADirectory(FsError):
    pass


class NotAFile(FsError):
    pass


class RootImmutable(FsError):
    pass


class LeaseDenied(FsError):
    pass


class QuotaExceeded(FsError):
    pass


class InvalidMove(FsError):
    pass


class Unsupported(FsError):
    pass


class SubtreeLocked(FsError):
    """An alive namenode holds a subtree lock on a traversed directory."""

    def __init__(self, inode_id, owner):
        super().__init__(f"inode {inode_id} is subtree-locked by namenode {owner}")
        self.inode_id = inode_id
        self.owner = owner


class SubtreeConflict(FsError):
    pass


class RetriesExhausted(FsError):
    pass


class NamenodeDown(NdbfsError):
    """The namenode serving the request is dead; clients resubmit elsewhere."""


# errors that describe the namespace rather than a transient system condition
LEGITIMATE_FS_ERRORS = (
    NotFound, AlreadyExists, PermissionDenied, NotEmpty, NotADirectory, NotAFile,
    RootImmutable, LeaseDenied, QuotaExceeded, InvalidMove, Unsupported, InvalidPath,
)
