//! Shared identifiers for tables, rows, and log positions.

pub type TableId = u32;
pub type RowId = u64;
/// Position in the backup's totally ordered write log, 1-based. 0 means "none".
pub type Seq = u64;
pub type TxnId = u64;

/// A row address: table plus dense row id within the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub table: TableId,
    pub row: RowId,
}

impl RowKey {
    pub const fn new(table: TableId, row: RowId) -> Self {
        Self { table, row }
    }
}

impl std::fmt::Display for RowKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.table, self.row)
    }
}

/// Kind of a logged row write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Insert,
    Update,
    Delete,
}

impl OpKind {
    pub(crate) fn to_u8(self) -> u8 {
        match self {
            OpKind::Insert => 0,
            OpKind::Update => 1,
            OpKind::Delete => 2,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(OpKind::Insert),
            1 => Some(OpKind::Update),
            2 => Some(OpKind::Delete),
            _ => None,
        }
    }
}
