// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use dpti_core::filters::{create_filters, table_decision, CmpOp, SeccompProgram, MAX_ARGS};
use dpti_core::syscalls;
use dpti_core::tasks::{Kernel, KernelConfig, ThreadOp};
use dpti_core::vmem::{AccessKind, Asid, FaultReason, Memory, Mode, Perms, PteBit, Vpn, PAGE_SIZE};
use dpti_core::Variant;
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum VmOp {
    MapFresh { space: usize, vpn: Vpn, perms: Perms, shared: bool },
    MapAlias { space: usize, vpn: Vpn, frame: usize, perms: Perms },
    Unmap { space: usize, vpn: Vpn },
    Protect { space: usize, vpn: Vpn, bit: u8, value: bool },
    Fork { space: usize },
    Destroy { space: usize },
    Touch { core: usize, space: usize, vpn: Vpn, kind: u8 },
    Write { core: usize, space: usize, vpn: Vpn, byte: u8 },
}

fn perms() -> impl Strategy<Value = Perms> {
    (any::<bool>(), any::<bool>()).prop_map(|(writable, executable)| Perms { user: true, writable, executable })
}

fn vm_op() -> impl Strategy<Value = VmOp> {
    let space = 0..4usize;
    let vpn = 16..24u64;
    prop_oneof![
        (space.clone(), vpn.clone(), perms(), any::<bool>())
            .prop_map(|(space, vpn, perms, shared)| VmOp::MapFresh { space, vpn, perms, shared }),
        (space.clone(), vpn.clone(), 0..16usize, perms())
            .prop_map(|(space, vpn, frame, perms)| VmOp::MapAlias { space, vpn, frame, perms }),
        (space.clone(), vpn.clone()).prop_map(|(space, vpn)| VmOp::Unmap { space, vpn }),
        (space.clone(), vpn.clone(), 0..3u8, any::<bool>())
            .prop_map(|(space, vpn, bit, value)| VmOp::Protect { space, vpn, bit, value }),
        space.clone().prop_map(|space| VmOp::Fork { space }),
        space.clone().prop_map(|space| VmOp::Destroy { space }),
        (0..3usize, space.clone(), vpn.clone(), 0..3u8)
            .prop_map(|(core, space, vpn, kind)| VmOp::Touch { core, space, vpn, kind }),
        (0..3usize, space, vpn, any::<u8>()).prop_map(|(core, space, vpn, byte)| VmOp::Write { core, space, vpn, byte }),
    ]
}

fn pick(spaces: &[Asid], i: usize) -> Option<Asid> {
    (!spaces.is_empty()).then(|| spaces[i % spaces.len()])
}

/// Applies one op the way the kernel would: permission changes are
/// followed by a shootdown and COW write faults are resolved and retried.
fn apply(mem: &mut Memory, spaces: &mut Vec<Asid>, op: &VmOp) {
    match *op {
        VmOp::MapFresh { space, vpn, perms, shared } => {
            if let Some(asid) = pick(spaces, space) {
                let frame = mem.alloc_frame();
                let _ = mem.map(asid, vpn, frame, perms, shared);
            }
        }
        VmOp::MapAlias { space, vpn, frame, perms } => {
            let frames: Vec<_> = mem.reverse_map().frames().collect();
            if let (Some(asid), false) = (pick(spaces, space), frames.is_empty()) {
                let _ = mem.map(asid, vpn, frames[frame % frames.len()], perms, true);
            }
        }
        VmOp::Unmap { space, vpn } => {
            if let Some(asid) = pick(spaces, space) {
                let _ = mem.unmap(asid, vpn);
            }
        }
        VmOp::Protect { space, vpn, bit, value } => {
            if let Some(asid) = pick(spaces, space) {
                let bit = [PteBit::User, PteBit::Writable, PteBit::Executable][bit as usize];
                if mem.pte(asid, vpn).is_some_and(|p| !(p.cow && bit == PteBit::Writable)) {
                    mem.set_bit(asid, vpn, bit, value).expect("mapped");
                    mem.flush_all_cores(asid, vpn);
                }
            }
        }
        VmOp::Fork { space } => {
            if let Some(asid) = pick(spaces, space) {
                spaces.push(mem.fork_space(asid).expect("fork"));
            }
        }
        VmOp::Destroy { space } => {
            if spaces.len() > 1 {
                let asid = spaces.remove(space % spaces.len());
                mem.destroy_space(asid);
            }
        }
        VmOp::Touch { core, space, vpn, kind } => {
            if let Some(asid) = pick(spaces, space) {
                let kind = [AccessKind::Read, AccessKind::Write, AccessKind::Exec][kind as usize];
                let _ = mem.access(core, asid, Mode::User, kind, vpn * PAGE_SIZE as u64);
            }
        }
        VmOp::Write { core, space, vpn, byte } => {
            if let Some(asid) = pick(spaces, space) {
                let addr = vpn * PAGE_SIZE as u64;
                if let Err(f) = mem.write_bytes(core, asid, Mode::User, addr, &[byte]) {
                    if mem.pte(asid, vpn).is_some_and(|p| p.cow) && f.reason != FaultReason::NotPresent {
                        mem.cow_resolve(asid, vpn).expect("cow page");
                        let _ = mem.write_bytes(core, asid, Mode::User, addr, &[byte]);
                    }
                }
            }
        }
    }
}

fn check_invariants(mem: &Memory, spaces: &[Asid]) -> Result<(), TestCaseError> {
    // The reverse map lists exactly the live mappings, with their current bits.
    let mut from_tables = BTreeMap::new();
    for space in mem.spaces() {
        for (&vpn, pte) in &space.entries {
            from_tables.insert((pte.frame, space.asid, vpn), pte.perms());
        }
    }
    let mut from_rmap = BTreeMap::new();
    for frame in mem.reverse_map().frames() {
        let aliases = mem.aliases_of(frame);
        prop_assert!(!aliases.is_empty(), "empty rmap entry for {frame:?}");
        for a in aliases {
            from_rmap.insert((frame, a.asid, a.vpn), a.perms);
        }
    }
    prop_assert_eq!(from_tables, from_rmap);

    // No core caches a translation that disagrees with the page tables.
    for core in 0..mem.cores() {
        for &asid in spaces {
            for vpn in 0..64 {
                if let Some(cached) = mem.tlb(core).lookup(asid, vpn) {
                    prop_assert_eq!(Some(cached), mem.pte(asid, vpn), "core {} {:?} vpn {}", core, asid, vpn);
                }
            }
        }
    }
    for space in mem.spaces() {
        for pte in space.entries.values() {
            prop_assert!(!(pte.cow && pte.writable));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn rmap_and_tlb_stay_coherent(ops in prop::collection::vec(vm_op(), 1..60)) {
        let mut mem = Memory::new(3);
        let mut spaces = vec![mem.create_space(), mem.create_space()];
        for op in &ops {
            apply(&mut mem, &mut spaces, op);
            check_invariants(&mem, &spaces)?;
        }
    }

    #[test]
    fn cow_writes_stay_private(
        writes in prop::collection::vec((any::<bool>(), 0..PAGE_SIZE, any::<u8>()), 1..20),
    ) {
        let mut mem = Memory::new(1);
        let parent = mem.create_space();
        let frame = mem.alloc_frame();
        mem.map(parent, 4, frame, Perms::USER_RW, false).unwrap();
        let base = 4 * PAGE_SIZE as u64;
        let child = mem.fork_space(parent).unwrap();
        let mut expect = [vec![0u8; PAGE_SIZE], vec![0u8; PAGE_SIZE]];
        for (in_child, offset, byte) in writes {
            let asid = if in_child { child } else { parent };
            let addr = base + offset as u64;
            if mem.write_bytes(0, asid, Mode::User, addr, &[byte]).is_err() {
                mem.cow_resolve(asid, 4).unwrap();
                mem.write_bytes(0, asid, Mode::User, addr, &[byte]).unwrap();
            }
            expect[in_child as usize][offset] = byte;
            prop_assert_eq!(mem.peek(parent, base, PAGE_SIZE).unwrap(), expect[0].clone());
            prop_assert_eq!(mem.peek(child, base, PAGE_SIZE).unwrap(), expect[1].clone());
        }
    }

    #[test]
    fn filter_table_matches_sequential_filter(
        allowed in prop::collection::btree_set(0..40u32, 0..20),
        primitive in prop::collection::vec((0..40u32, 0..MAX_ARGS as u8, 0..6u8, 0..8u64), 0..10),
        calls in prop::collection::vec((0..45u32, prop::array::uniform6(0..10u64)), 1..40),
        explicit_denies in any::<bool>(),
    ) {
        let ops = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];
        let mut table = create_filters();
        for nr in allowed {
            table.add_rule(nr).unwrap();
        }
        for (nr, arg, op, value) in primitive {
            // Duplicate argument filters are rejected; skipping them is fine.
            let _ = table.add_rule_primitive(nr, arg, ops[op as usize], value);
        }
        let program = SeccompProgram::from_table(&table, explicit_denies).unwrap();
        for (nr, args) in calls {
            prop_assert_eq!(table_decision(&table, nr, &args), program.eval(nr, &args).action, "nr {} args {:?}", nr, args);
        }
    }

    #[test]
    fn filter_refcount_tracks_live_threads(
        main in prop::collection::vec(0..4u8, 1..6),
        child in prop::collection::vec(0..4u8, 1..4),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 200),
    ) {
        let to_ops = |codes: &[u8]| -> Vec<ThreadOp> {
            codes
                .iter()
                .map(|c| match c {
                    0 => ThreadOp::Fork { program: "child".into() },
                    1 => ThreadOp::Clone { program: "child".into() },
                    2 => ThreadOp::Exit { code: 0, group: true },
                    _ => ThreadOp::Compute { cycles: 1 },
                })
                .collect()
        };
        let mut k = Kernel::new(KernelConfig { variant: Variant::Stash, ..KernelConfig::default() }, 2);
        // Children never fork again, so the process tree stays bounded.
        let child_ops: Vec<ThreadOp> = to_ops(&child).into_iter().filter(|op| !matches!(op, ThreadOp::Fork { .. })).collect();
        k.add_program("child", child_ops);
        let tid = k.spawn_process("main", to_ops(&main));
        let mut table = create_filters();
        table.add_rule(syscalls::FORK).unwrap();
        table.add_rule(syscalls::CLONE).unwrap();
        k.install_filters(tid, table, false).unwrap();

        let live = |k: &Kernel| -> BTreeMap<usize, u32> {
            let mut m = BTreeMap::new();
            for p in k.procs.values() {
                if let Some(id) = p.filters {
                    *m.entry(id).or_default() += k.live_threads(p.pid).len() as u32;
                }
            }
            m
        };
        for pick in picks {
            let runnable = k.runnable();
            if runnable.is_empty() {
                break;
            }
            k.step(runnable[pick.index(runnable.len())]).unwrap();
            let counts = live(&k);
            for (id, table) in k.filters.iter().enumerate() {
                let expected = counts.get(&id).copied().unwrap_or(0);
                prop_assert_eq!(table.refcount(), expected, "filter {}", id);
                prop_assert_eq!(table.is_freed(), expected == 0);
            }
        }
        let ids: BTreeSet<_> = k.procs.values().filter_map(|p| p.filters).collect();
        prop_assert!(ids.len() <= 1, "fork and clone share one table");
    }
}
