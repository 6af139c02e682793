"""Random non-trigger requests for the vulnerable/patched differential check.

Each generator draws a request from the valid-or-harmlessly-invalid input
space of one hypercall, skipping exactly the inputs that reach the defect.
Those are the only inputs on which the two handler variants may disagree.
"""

import random

from hvsim.addresses import Gpfn
from hvsim.config import Config
from hvsim.core import Bitness, Hypervisor, Variant
from hvsim.dispatch import (
    Dispatcher,
    GnttabOp,
    HandlerVariantConfig,
    HypercallRequest,
    MemoryOp,
    MmuextOp,
    PhysdevOp,
    SetDebugreg,
)
from hvsim.grant_table import GrantEntry, GrantFlags, issue_grant, set_version
from hvsim.memory_ops import MEMF_POPULATE_ON_DEMAND

CFG = Config(machine_frames=1024, guest_frames=64)
PAGE = CFG.page_size


def build_world(variant):
    hv = Hypervisor(CFG)
    hv.create_domain(1)
    hv.create_domain(2, bitness=Bitness.BITS32)
    hv.create_domain(3, paravirtualized=False)
    d1, d2, d3 = (hv.domain(i) for i in (1, 2, 3))
    for gref, (grantee, gpfn, flags) in enumerate(
        [(2, 10, "readwrite"), (2, 11, "read"), (3, 12, "readwrite"), (1, 13, "readwrite")], start=1
    ):
        frame = hv.gmfn_to_mfn(d1, hv.translate_p2m(d1, Gpfn(gpfn)))
        issue_grant(hv, d1, GrantEntry.normal(gref, grantee, frame, GrantFlags(flags)))
    set_version(hv, d3, 2, variant)
    issue_grant(hv, d3, GrantEntry.transitive(1, 2, 1, 3))
    frame = hv.gmfn_to_mfn(d3, hv.translate_p2m(d3, Gpfn(20)))
    issue_grant(hv, d3, GrantEntry.normal(2, 1, frame))
    return hv


def va(gpfn, off=0):
    return CFG.guest_va_base + gpfn * PAGE + off


def _gmfn(hv, dom, gpfn):
    return hv.translate_p2m(hv.domain(dom), Gpfn(gpfn)).value


def _scratch(hv, dom, values):
    """Write an element array into the caller's page 2 and return its VA."""
    hv.write_elements(hv.domain(dom), hv.guest_va_of(Gpfn(2)), values, CFG.element_size_bytes)
    return va(2)


def _rare_bad_address(rng):
    return rng.choice([va(CFG.guest_frames), 0x1000, va(0, PAGE * CFG.guest_frames - 4)])


def gen_set_debugreg(rng, hv):
    reg = rng.choice([0, 1, 2, 3, 7, 7, 7, 4, 6, 8])
    value = rng.getrandbits(32) if reg == 7 else rng.getrandbits(64)
    return HypercallRequest(rng.choice([1, 2, 3]), SetDebugreg(reg, value))


def gen_get_free_pirq(rng, hv):
    dom = rng.choice([1, 2, 3])
    if hv.domain(dom).pirqs.get_free_pirq() < 0:
        return None
    return HypercallRequest(dom, PhysdevOp("PHYSDEVOP_get_free_pirq",
                                           {"type": rng.choice(["MAP_PIRQ_TYPE_GSI", "MAP_PIRQ_TYPE_MSI"])}))


def gen_clear_page(rng, hv):
    mfn = rng.randrange(CFG.machine_frames)
    return HypercallRequest(rng.choice([1, 2, 3]), MmuextOp({"arg1_mfn": mfn}))


def gen_populate(rng, hv):
    dom = rng.choice([1, 2, 3])
    pod = rng.random() < 0.3
    if pod and not hv.domain(dom).translated_paging:
        return None
    order = rng.choice([0, 0, 1, 2])
    n = rng.randint(0, 4)
    gpfns = [rng.choice([rng.randrange(CFG.guest_frames), CFG.guest_frames + rng.randrange(400)]) for _ in range(n)]
    start = _rare_bad_address(rng) if rng.random() < 0.1 else _scratch(hv, dom, gpfns)
    return HypercallRequest(dom, MemoryOp("XENMEM_populate_physmap", {
        "extent_start": start, "extent_order": order, "nr_extents": n,
        "flags": MEMF_POPULATE_ON_DEMAND if pod else 0,
    }))


def gen_exchange(rng, hv):
    dom = rng.choice([1, 2])
    n = rng.randint(1, 4)
    gpfns = rng.sample(range(16, CFG.guest_frames), n)
    try:
        gmfns = [_gmfn(hv, dom, g) for g in gpfns]
    except Exception:
        return None
    if rng.random() < 0.1:
        gmfns[0] = 10 ** 6  # not the caller's frame
    out = va(rng.choice([3, 4, 5]), rng.randrange(0, PAGE - 64, 8))
    return HypercallRequest(dom, MemoryOp("XENMEM_exchange", {
        "in": {"extent_start": _scratch(hv, dom, gmfns), "extent_order": 0, "nr_extents": n},
        "out": {"extent_start": out, "extent_order": 0, "nr_extents": n + (rng.random() < 0.05)},
    }))


def gen_set_version(rng, hv):
    dom = rng.choice([1, 2, 3])
    version = rng.choice([1, 2, 2, 0, 3])
    gt = hv.domain(dom).grant_table
    successful_downgrade = (gt.version == 2 and version == 1 and not gt.active
                            and not any(e.is_transitive for e in gt.entries.values()))
    if successful_downgrade:
        return None
    return HypercallRequest(dom, GnttabOp("GNTTABOP_set_version", {"version": version}))


def gen_get_status_frames(rng, hv):
    caller = rng.choice([1, 2, 3])
    target = rng.choice([1, 2, 3, 3, 9])
    nr = rng.randint(0, 2)
    if hv.domain(caller).bitness is Bitness.BITS32 and target in hv.domains:
        if nr > len(hv.domain(target).grant_table.status_frames):
            return None
    return HypercallRequest(caller, GnttabOp("GNTTABOP_get_status_frames", {
        "nr_frames": nr, "dom": target, "frame_list": va(rng.choice([3, 6]))}))


def _ref_side_is_trigger(hv, domid, gref):
    """True if acquiring (domid, gref) ends at a non-transitive entry in a v2 table."""
    seen = set()
    while (domid, gref) not in seen:
        seen.add((domid, gref))
        d = hv.domains.get(domid)
        entry = d.grant_table.entries.get(gref) if d else None
        if entry is None:
            return False
        if not entry.is_transitive:
            return d.grant_table.version == 2
        domid, gref = entry.trans_domid, entry.trans_gref
    return False


def gen_copy(rng, hv):
    caller = rng.choice([1, 2, 3])
    sides = []
    for _ in range(2):
        if rng.random() < 0.5:
            sides.append(({"ref_or_gmfn": _gmfn(hv, caller, rng.randrange(8, CFG.guest_frames)),
                           "domid": caller}, False))
        else:
            domid, gref = rng.choice([1, 2, 3]), rng.randint(0, 5)
            if _ref_side_is_trigger(hv, domid, gref):
                return None
            sides.append(({"ref_or_gmfn": gref, "domid": domid}, True))
    (src, src_ref), (dst, dst_ref) = sides
    return HypercallRequest(caller, GnttabOp("GNTTABOP_copy", {
        "source": src, "dest": dst, "len": rng.choice([0, 8, 64, PAGE, PAGE + 1]),
        "source_is_ref": src_ref, "dest_is_ref": dst_ref}))


GENERATORS = {
    "set_debugreg": gen_set_debugreg,
    "get_free_pirq": gen_get_free_pirq,
    "mmuext_clear_page": gen_clear_page,
    "populate_physmap": gen_populate,
    "memory_exchange": gen_exchange,
    "set_version": gen_set_version,
    "get_status_frames": gen_get_status_frames,
    "grant_copy": gen_copy,
}


def run_differential(name, n_requests=500, seed=0, reset_every=100):
    """Dispatch the same request stream to both variants.

    Returns a list of mismatch descriptions (empty means identical results
    and state digests after every request) and the number of requests run.
    """
    gen = GENERATORS[name]
    rng = random.Random(f"{name}:{seed}")
    mismatches = []
    done = 0
    worlds = None
    while done < n_requests:
        if worlds is None or done % reset_every == 0:
            worlds = {v: build_world(v) for v in Variant}
            disp = {v: Dispatcher(hv, HandlerVariantConfig.uniform(v)) for v, hv in worlds.items()}
        req = gen(rng, worlds[Variant.PATCHED])
        if req is None:
            continue
        if name in ("populate_physmap", "memory_exchange"):
            # the scratch array was written into the patched world only
            _mirror_scratch(worlds, req)
        res = {v: disp[v].dispatch(req) for v in Variant}
        a, b = (res[v].to_dict() | {"steps": res[v].steps} for v in Variant)
        if a != b:
            mismatches.append(f"request {done}: {req} -> {a} vs {b}")
        elif worlds[Variant.VULNERABLE].digest() != worlds[Variant.PATCHED].digest():
            mismatches.append(f"request {done}: {req} -> state digests differ")
        done += 1
    return mismatches, done


def _mirror_scratch(worlds, req):
    src, dst = worlds[Variant.PATCHED], worlds[Variant.VULNERABLE]
    d_src, d_dst = src.domain(req.caller), dst.domain(req.caller)
    page = src.guest_va_of(Gpfn(2))
    dst.guest_write(d_dst, page, src.guest_read(d_src, page, PAGE))
