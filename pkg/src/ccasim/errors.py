"""Exception hierarchy shared by every layer of the simulator."""


class SimError(Exception):
    """Base class for every simulator-level rejection or fault."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class GranuleProtectionFault(SimError):
    """The granule protection check blocked an access."""

    def __init__(self, core: int, granule: int, world, pas, access):
        self.core = core
        self.granule = granule
        self.world = world
        self.pas = pas
        self.access = access
        super().__init__(
            f"GPF core={core} granule={granule} world={world.name} "
            f"pas={pas.name} access={access.name}")


class AddressOutOfRange(SimError):
    pass


class LayoutInvalid(SimError):
    pass


class Denied(SimError):
    """The root monitor refused a GPT transition."""


class ScrubViolation(SimError):
    """Undelegate requested on a granule whose content is not all-zero."""


class WrongState(SimError):
    pass


class RangeInvalid(SimError):
    pass


class OverlapViolation(SimError):
    pass


class NotContiguous(SimError):
    pass


class SharingSealed(SimError):
    pass


class NotShared(SimError):
    pass


class StageTwoFault(SimError):
    """Guest touched an IPA with no stage-2 mapping."""


class PermissionFault(SimError):
    """Stage-2 permissions forbid the access (e.g. execute on an NX page)."""


class PointerEscape(SimError):
    """A virtqueue descriptor points outside the shared region."""


class FrameInvalid(SimError):
    pass


class TamperDetected(SimError):
    pass


class ManifestInvalid(SimError):
    pass
