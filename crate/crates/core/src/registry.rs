//! Stable identities for threads and shared objects.
//!
//! Identities are handed out in creation order. Since program behaviour is a
//! function of the schedule, two executions under the same schedule create
//! things in the same order and therefore see the same ids.

use std::collections::HashMap;

use crate::error::RegistryError;
use crate::model::{ObjectId, ThreadId};

/// Opaque token minted by the shadow API when an object is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectHandle(pub u64);

#[derive(Debug, Default)]
pub struct IdentityTable {
    next_tid: u32,
    next_oid: u32,
    object_map: HashMap<ObjectHandle, ObjectId>,
}

impl IdentityTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_thread(&mut self) -> ThreadId {
        let tid = ThreadId(self.next_tid);
        self.next_tid += 1;
        tid
    }

    pub fn register_object(&mut self, handle: ObjectHandle) -> Result<ObjectId, RegistryError> {
        if self.object_map.contains_key(&handle) {
            return Err(RegistryError::Duplicate(handle.0));
        }
        let oid = ObjectId(self.next_oid);
        self.next_oid += 1;
        self.object_map.insert(handle, oid);
        Ok(oid)
    }

    pub fn resolve(&self, handle: ObjectHandle) -> Result<ObjectId, RegistryError> {
        self.object_map
            .get(&handle)
            .copied()
            .ok_or(RegistryError::Unknown(handle.0))
    }

    pub fn thread_count(&self) -> u32 {
        self.next_tid
    }

    pub fn object_count(&self) -> u32 {
        self.next_oid
    }
}
