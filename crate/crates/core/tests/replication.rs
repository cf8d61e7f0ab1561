use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treedoc::protocol::{initiate_flatten, CoreEndpoint, Delivery, Operation, Role, Site};
use treedoc::{flatten_local, Atom, SiteId, Tid, Treedoc};

/// Each site edits its own replica while occasionally hearing from the
/// others; returns every operation generated.
fn concurrent_session(sites: &mut [Site], steps: usize, rng: &mut ChaCha8Rng) -> Vec<Operation> {
    let mut all = Vec::new();
    for step in 0..steps {
        let i = rng.gen_range(0..sites.len());
        let s = &mut sites[i];
        let op = if s.replica().len() > 0 && rng.gen_bool(0.35) {
            s.delete_at(rng.gen_range(0..s.replica().len())).unwrap()
        } else {
            s.insert_at(rng.gen_range(0..=s.replica().len()), format!("{step} ")).unwrap()
        };
        s.take_outbox();
        all.push(op);
        // partial gossip so later edits depend on some remote ones
        if rng.gen_bool(0.3) {
            let j = rng.gen_range(0..sites.len());
            for op in all.choose_multiple(rng, 3).cloned().collect::<Vec<_>>() {
                sites[j].deliver(op);
            }
        }
    }
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffled_duplicated_delivery_converges(seed in any::<u64>(), n in 2usize..5, steps in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites: Vec<Site> = (0..n).map(|i| Site::new(SiteId::new(format!("s{i}")), Role::Core)).collect();
        let ops = concurrent_session(&mut sites, steps, &mut rng);
        for site in sites.iter_mut() {
            let mut feed = ops.clone();
            feed.extend(ops.iter().filter(|_| rng.gen_bool(0.3)).cloned());
            feed.shuffle(&mut rng);
            for op in feed {
                site.deliver(op);
            }
            prop_assert!(site.pending().is_empty());
        }
        let d = sites[0].replica().digest();
        for s in &sites[1..] {
            prop_assert_eq!(s.replica().digest(), d.clone());
            prop_assert_eq!(s.replica().text_bytes(), sites[0].replica().text_bytes());
        }
        // a committed flatten keeps the text and leaves every core identical
        let (first, rest) = sites.split_first_mut().unwrap();
        let mut others: Vec<&mut dyn CoreEndpoint> = rest.iter_mut().map(|s| s as &mut dyn CoreEndpoint).collect();
        let text = first.replica().text_bytes();
        initiate_flatten(first, &mut others, 1).unwrap();
        prop_assert_eq!(first.epoch(), 1);
        prop_assert_eq!(first.replica().text_bytes(), text);
        for s in rest.iter() {
            prop_assert_eq!(s.replica().digest(), first.replica().digest());
        }
    }

    #[test]
    fn redelivery_is_reported_duplicate(seed in any::<u64>(), steps in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = vec![Site::new(SiteId::from("a"), Role::Core), Site::new(SiteId::from("b"), Role::Core)];
        let ops = concurrent_session(&mut sites, steps, &mut rng);
        let mut fresh = Site::new(SiteId::from("c"), Role::Core);
        for op in &ops {
            fresh.deliver(op.clone());
        }
        let before = fresh.replica().digest();
        for op in &ops {
            prop_assert_eq!(fresh.deliver(op.clone()), Delivery::Duplicate);
        }
        prop_assert_eq!(fresh.replica().digest(), before);
    }

    #[test]
    fn tids_round_trip_through_encoding(seed in any::<u64>(), steps in 1usize..150) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut doc = Treedoc::new();
        let sites: Vec<SiteId> = ["x", "yy", "zzz"].into_iter().map(SiteId::from).collect();
        for i in 0..steps {
            let tid = doc.alloc_tid_at_position(rng.gen_range(0..=doc.len()), &sites[i % 3]).unwrap();
            doc.insert(&tid, Atom::from(vec![i as u8])).unwrap();
        }
        for node in doc.nodes() {
            let tid = node.tid();
            let bytes = tid.encode();
            prop_assert_eq!(bytes.len(), tid.encoded_len());
            prop_assert_eq!(Tid::decode(&bytes).unwrap(), tid);
        }
        let flat = flatten_local(&doc).new_doc;
        prop_assert_eq!(flat.text_bytes(), doc.text_bytes());
        prop_assert!(flat.check_invariants().is_ok());
    }
}
