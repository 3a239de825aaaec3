print("brokendeps")
