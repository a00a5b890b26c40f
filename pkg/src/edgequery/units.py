"""Slot duration. Internals count slots; anything reported externally is in seconds."""

SLOT_SECONDS = 0.1


def slots_to_seconds(slots, slot_seconds: float | None = None):
    # looked up at call time so an override of SLOT_SECONDS propagates everywhere
    return slots * (SLOT_SECONDS if slot_seconds is None else slot_seconds)
