#!/usr/bin/env python3
"""Regenerate tests/data/nyc_yellow_sample_10k.csv.gz.

A deterministic 10k-row file in the 2016 NYC yellow-cab CSV schema, clustered
around Manhattan, with a handful of malformed rows and far-away coordinates so
ingestion counters have something to count.  Committed output; rerun only if
the schema handling changes.
"""

import gzip
import math
import random
from datetime import datetime, timedelta
from pathlib import Path

HEADER = (
    "VendorID,tpep_pickup_datetime,tpep_dropoff_datetime,passenger_count,"
    "trip_distance,pickup_longitude,pickup_latitude,RatecodeID,"
    "store_and_fwd_flag,dropoff_longitude,dropoff_latitude,payment_type,"
    "fare_amount,extra,mta_tax,tip_amount,tolls_amount,"
    "improvement_surcharge,total_amount"
)

HOTSPOTS = [  # (lat, lon, weight): midtown, downtown, uptown
    (40.7580, -73.9855, 0.5),
    (40.7128, -74.0060, 0.3),
    (40.8075, -73.9626, 0.2),
]


def pick_point(rng: random.Random) -> tuple[float, float]:
    r = rng.random()
    acc = 0.0
    for lat0, lon0, w in HOTSPOTS:
        acc += w
        if r <= acc:
            return (
                lat0 + rng.gauss(0, 0.012),
                lon0 + rng.gauss(0, 0.012),
            )
    return HOTSPOTS[0][0], HOTSPOTS[0][1]


def main() -> None:
    rng = random.Random(20160101)
    start = datetime(2016, 1, 4, 0, 0, 0)  # a Monday, local NY time
    rows = [HEADER]
    n_total = 10_000
    n_malformed = 15
    n_faraway = 120
    for i in range(n_total - n_malformed - n_faraway):
        minute = rng.random() ** 0.7 * 7 * 24 * 60  # denser early in the week
        pickup = start + timedelta(minutes=minute)
        duration = timedelta(seconds=rng.randint(120, 2400))
        plat, plon = pick_point(rng)
        dlat, dlon = pick_point(rng)
        dist = math.hypot(plat - dlat, plon - dlon) * 69.0
        fare = round(2.5 + dist * 2.5 + rng.random() * 3, 2)
        rows.append(
            f"{rng.randint(1, 2)},{pickup:%Y-%m-%d %H:%M:%S},"
            f"{pickup + duration:%Y-%m-%d %H:%M:%S},{rng.randint(1, 5)},"
            f"{dist:.2f},{plon:.6f},{plat:.6f},1,N,{dlon:.6f},{dlat:.6f},"
            f"{rng.randint(1, 2)},{fare},0.5,0.5,{round(fare * 0.15, 2)},0,0.3,"
            f"{round(fare * 1.18, 2)}"
        )
    for i in range(n_faraway):
        # plausible rows whose pickups fall outside any Manhattan polygon
        pickup = start + timedelta(minutes=rng.random() * 7 * 24 * 60)
        rows.append(
            f"2,{pickup:%Y-%m-%d %H:%M:%S},{pickup + timedelta(minutes=9):%Y-%m-%d %H:%M:%S},"
            f"1,3.00,0.000000,0.000000,1,N,0.000000,0.000000,2,10.0,0.5,0.5,0,0,0.3,11.3"
        )
    for i in range(n_malformed):
        if i % 3 == 0:
            rows.append("2,not-a-timestamp,2016-01-04 09:00:00,1,1.0,-73.98,40.75,1,N,-73.97,40.76,1,8.0,0.5,0.5,0,0,0.3,9.3")
        elif i % 3 == 1:
            rows.append("1,2016-01-04 08:00:00,2016-01-04 08:10:00,1,1.0,-73.98,95.0,1,N,-73.97,40.76,1,8.0,0.5,0.5,0,0,0.3,9.3")
        else:
            rows.append("1,2016-01-04 08:00:00,2016-01-04 08:10:00,1,1.0,,,1,N,,,1,8.0,0.5,0.5,0,0,0.3,9.3")

    body = rows[:1] + sorted(rows[1:], key=lambda r: r.split(",")[1])
    out = Path(__file__).parent.parent / "tests" / "data" / "nyc_yellow_sample_10k.csv.gz"
    out.parent.mkdir(parents=True, exist_ok=True)
    with gzip.open(out, "wt") as fh:
        fh.write("\n".join(body) + "\n")
    print(f"wrote {out} ({n_total} rows + header)")


if __name__ == "__main__":
    main()
