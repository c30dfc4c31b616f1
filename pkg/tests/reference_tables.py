"""Printed per-class DICE rows and averages of the three result tables.

Each entry: (table, row label, eleven per-class values, printed average).
Class order: bottle, can, chain, drink-carton, hook, propeller,
shampoo-bottle, standing-bottle, tire, valve, wall.
"""

ROWS = [
    ("T1", "UNet", [67.35, 55.64, 25.79, 8.10, 0.02, 0.23, 65.24, 1.87, 75.40, 37.82, 86.76], 38.57),
    ("T1", "SegResNet", [74.81, 67.96, 55.69, 5.35, 0.14, 26.58, 75.79, 0.03, 83.73, 49.33, 88.55], 48.00),
    ("T1", "FCN", [82.58, 77.17, 72.77, 83.36, 65.58, 72.06, 73.36, 83.62, 86.92, 66.60, 87.00], 77.37),
    ("T1", "FCN*", [82.51, 78.60, 77.61, 86.17, 76.44, 83.83, 79.20, 89.92, 89.87, 71.13, 87.79], 82.10),
    ("T1", "DeeplabV3", [83.88, 77.57, 73.97, 83.11, 73.93, 80.67, 81.98, 90.29, 85.37, 64.76, 88.13], 80.33),
    ("T1", "DeeplabV3*", [86.43, 77.38, 75.36, 85.52, 76.48, 83.64, 82.20, 90.24, 86.85, 65.46, 87.31], 81.53),
    ("T1", "SAM default", [5.82, 7.80, 1.44, 19.98, 5.84, 5.47, 9.21, 3.76, 7.57, 4.97, 7.75], 7.24),
    ("T1", "SAM box", [63.25, 32.04, 35.42, 13.72, 9.74, 41.26, 70.34, 60.35, 33.35, 36.52, 46.99], 40.27),
    ("T2", "FZ/L", [87.96, 86.47, 73.85, 89.26, 74.87, 82.82, 90.89, 91.52, 93.19, 73.72, 84.23], 84.44),
    ("T2", "L/L", [91.88, 89.30, 80.58, 89.91, 80.13, 91.44, 92.49, 91.94, 94.53, 77.33, 88.24], 87.98),
    ("T2", "P/L", [92.33, 87.78, 80.39, 89.95, 80.93, 90.30, 92.42, 92.07, 95.30, 77.94, 88.37], 87.98),
    ("T2", "FZ/FF", [90.84, 89.03, 75.99, 89.68, 78.42, 87.84, 91.75, 92.89, 93.66, 73.47, 87.90], 86.50),
    ("T2", "L/FF", [92.08, 89.24, 80.79, 90.34, 81.14, 91.47, 92.65, 92.46, 94.12, 78.52, 90.09], 88.44),
    ("T2", "P/FF", [92.25, 87.01, 79.78, 90.28, 80.49, 90.69, 92.93, 93.40, 94.85, 78.93, 89.02], 88.15),
    ("T3", "FF/C", [0.77, 0.02, 24.39, 0.04, 0.02, 0.01, 0.01, 0.01, 30.09, 0.04, 68.95], 11.31),
    ("T3", "FZ/C", [75.08, 37.84, 62.72, 65.54, 7.94, 51.20, 66.31, 12.72, 76.64, 29.20, 81.83], 51.55),
    ("T3", "L/C", [82.44, 62.05, 69.03, 82.05, 69.47, 76.82, 80.19, 89.38, 86.39, 63.44, 84.85], 76.92),
    ("T3", "P/C", [84.20, 67.15, 72.11, 81.22, 41.57, 72.23, 77.40, 82.61, 84.98, 59.66, 84.53], 73.42),
    ("T3", "FZ/FF", [73.75, 50.99, 58.29, 65.55, 19.19, 56.41, 73.51, 85.19, 72.14, 39.04, 81.16], 61.38),
    ("T3", "L/FF", [79.82, 66.26, 68.15, 84.07, 53.85, 77.65, 82.10, 90.30, 82.38, 54.60, 85.19], 74.94),
    ("T3", "P/FF", [88.01, 64.69, 67.22, 83.91, 60.86, 77.83, 82.31, 82.20, 84.33, 53.28, 85.11], 75.43),
    ("T3", "FZ/L", [54.15, 23.19, 56.01, 50.24, 0.92, 18.37, 28.09, 10.25, 61.99, 27.44, 78.81], 37.22),
    ("T3", "L/L", [85.19, 59.90, 69.65, 80.75, 61.88, 76.22, 80.68, 86.89, 86.08, 68.40, 86.40], 76.55),
    ("T3", "P/L", [84.73, 68.78, 67.97, 83.77, 62.33, 80.62, 80.05, 90.30, 89.19, 62.03, 85.37], 77.74),
]
