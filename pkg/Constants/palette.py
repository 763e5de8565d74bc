class GarmentColors:
    # Flat RGB entries in [0,1]; token name == attribute value
    RED = (0.80, 0.10, 0.12)
    BLUE = (0.12, 0.25, 0.75)
    GREEN = (0.15, 0.60, 0.25)
    YELLOW = (0.95, 0.80, 0.15)
    BLACK = (0.08, 0.08, 0.10)
    WHITE = (0.92, 0.92, 0.90)
    PINK = (0.95, 0.55, 0.70)
    GRAY = (0.50, 0.50, 0.52)


PALETTE = {
    "red": GarmentColors.RED,
    "blue": GarmentColors.BLUE,
    "green": GarmentColors.GREEN,
    "yellow": GarmentColors.YELLOW,
    "black": GarmentColors.BLACK,
    "white": GarmentColors.WHITE,
    "pink": GarmentColors.PINK,
    "gray": GarmentColors.GRAY,
}

SKIN = (0.87, 0.70, 0.58)
HAIR = (0.20, 0.13, 0.08)
SHOES = (0.18, 0.16, 0.15)

# Pattern accents are mixed toward these
FLORAL_ACCENT = (1.0, 0.95, 0.60)
GRAPHIC_ACCENT = (0.05, 0.05, 0.05)
